"""Miniature 3-D residual video classifier with configurable attention blocks.

The backbone is a stem convolution plus a few strided residual stages; the
attention blocks slot in after chosen stages and are exact identities at
initialization, so a freshly built model with blocks matches one without.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attention import TemporalAttentionBlock
from .errors import ContractError, ShapeError
from .tensorio import load_tensor, save_tensor

__all__ = ["ModelConfig", "Conv3dLayer", "ResidualBlock3d", "VideoClassifier",
           "build_model", "save_checkpoint", "load_checkpoint"]


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; defaults are the desk-scale 64x64 profile."""

    in_channels: int = 3
    frames: int = 20
    height: int = 64
    width: int = 64
    num_classes: int = 4
    stem_channels: int = 8
    stage_channels: tuple = (16, 32, 64)
    stage_strides: tuple = ((2, 2, 2), (2, 2, 2), (1, 2, 2))
    blocks_per_stage: tuple = (1, 1, 1)
    # four attention blocks by default: two after each of the two deepest stages
    attention_stages: tuple = (1, 2)
    attention_per_stage: int = 2

    def __post_init__(self):
        if len(self.stage_channels) != len(self.stage_strides) or \
                len(self.stage_channels) != len(self.blocks_per_stage):
            raise ContractError("stage tuples must have equal length")
        for s in self.attention_stages:
            if not 0 <= s < len(self.stage_channels):
                raise ContractError(f"attention stage {s} does not exist")


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _he_kernel(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


class Conv3dLayer:
    def __init__(self, rng, in_channels, out_channels, kernel=3, stride=1, padding=1):
        k = (kernel,) * 3 if isinstance(kernel, int) else tuple(kernel)
        self.kernel = _he_kernel(rng, (out_channels, in_channels) + k)
        self.bias = np.zeros(out_channels)
        self.stride = stride
        self.padding = padding

    def forward(self, tape, x):
        weight = tape.watch_param(self.kernel)
        bias = tape.watch_param(self.bias)
        out = ad.conv3d(x, weight, stride=self.stride, padding=self.padding)
        return ad.add(out, ad.reshape(bias, (-1, 1, 1, 1)))

    def parameters(self):
        return {"kernel": self.kernel, "bias": self.bias}


class ResidualBlock3d:
    """conv-relu-conv plus a skip path; 1x1x1 projection when shape changes."""

    def __init__(self, rng, in_channels, out_channels, stride=1):
        self.conv1 = Conv3dLayer(rng, in_channels, out_channels, stride=stride)
        self.conv2 = Conv3dLayer(rng, out_channels, out_channels)
        if in_channels != out_channels or stride != 1:
            self.skip = Conv3dLayer(rng, in_channels, out_channels,
                                    kernel=1, stride=stride, padding=0)
        else:
            self.skip = None

    def forward(self, tape, x):
        branch = self.conv2.forward(tape, ad.relu(self.conv1.forward(tape, x)))
        shortcut = x if self.skip is None else self.skip.forward(tape, x)
        return ad.relu(ad.add(branch, shortcut))

    def parameters(self):
        params = {}
        for prefix, layer in (("conv1", self.conv1), ("conv2", self.conv2),
                              ("skip", self.skip)):
            if layer is not None:
                for name, arr in layer.parameters().items():
                    params[f"{prefix}.{name}"] = arr
        return params


class VideoClassifier:
    """Stem + residual stages + optional attention blocks + mean-pool head."""

    def __init__(self, config: ModelConfig, rng=0):
        rng = _as_rng(rng)
        self.config = config
        self.stem = Conv3dLayer(rng, config.in_channels, config.stem_channels,
                                stride=(1, 2, 2))
        self.stages = []
        self.attention = {}
        in_c = config.stem_channels
        for idx, (out_c, stride, blocks) in enumerate(zip(
                config.stage_channels, config.stage_strides,
                config.blocks_per_stage)):
            stage = []
            for b in range(blocks):
                stage.append(ResidualBlock3d(rng, in_c, out_c,
                                             stride=stride if b == 0 else 1))
                in_c = out_c
            self.stages.append(stage)
            if idx in config.attention_stages:
                self.attention[idx] = [
                    TemporalAttentionBlock(out_c, rng=rng)
                    for _ in range(config.attention_per_stage)]
        self.head_weight = rng.normal(0.0, 0.01, (config.num_classes, in_c))
        self.head_bias = np.zeros(config.num_classes)

    def parameters(self):
        params = {"stem.kernel": self.stem.kernel, "stem.bias": self.stem.bias}
        for i, stage in enumerate(self.stages):
            for b, block in enumerate(stage):
                for name, arr in block.parameters().items():
                    params[f"stage{i}.block{b}.{name}"] = arr
            for a, attn in enumerate(self.attention.get(i, [])):
                for name, arr in attn.parameters().items():
                    params[f"stage{i}.attn{a}.{name}"] = arr
        params["head.weight"] = self.head_weight
        params["head.bias"] = self.head_bias
        return params

    def forward(self, tape, frames):
        """Logits for one clip given as a 3 x T x H x W array or tensor."""
        x = frames if isinstance(frames, ad.DiffTensor) else ad.constant(frames)
        cfg = self.config
        expected = (cfg.in_channels, cfg.frames, cfg.height, cfg.width)
        if x.data.shape != expected:
            raise ShapeError(f"clip shape {x.data.shape}, model expects {expected}")
        x = ad.relu(self.stem.forward(tape, x))
        for i, stage in enumerate(self.stages):
            for block in stage:
                x = block.forward(tape, x)
            for attn in self.attention.get(i, []):
                x = attn.forward(tape, x)
        pooled = ad.reduce_mean(x, axes=(1, 2, 3))
        weight = tape.watch_param(self.head_weight)
        bias = tape.watch_param(self.head_bias)
        logits = ad.matmul(weight, ad.reshape(pooled, (-1, 1)))
        return ad.add(ad.reshape(logits, (-1,)), bias)

    def logits(self, frames):
        """Plain-array forward pass without recording."""
        return self.forward(ad.Tape(active=False), frames).data

    def predict(self, frames):
        return int(np.argmax(self.logits(frames)))

    def copy_weights_from(self, other):
        """Copy arrays for every parameter name both models share."""
        mine = self.parameters()
        theirs = other.parameters()
        for name in mine.keys() & theirs.keys():
            if mine[name].shape != theirs[name].shape:
                raise ShapeError(f"parameter {name}: shape mismatch")
            mine[name][...] = theirs[name]


def build_model(config: ModelConfig, seed=0):
    return VideoClassifier(config, rng=np.random.default_rng(seed))


def _config_to_json(config: ModelConfig):
    d = asdict(config)
    d["stage_strides"] = [list(s) for s in config.stage_strides]
    return d


def _config_from_json(d):
    d = dict(d)
    for key in ("stage_channels", "blocks_per_stage", "attention_stages"):
        d[key] = tuple(d[key])
    d["stage_strides"] = tuple(tuple(s) for s in d["stage_strides"])
    return ModelConfig(**d)


def save_checkpoint(model: VideoClassifier, directory):
    """Checkpoint = JSON manifest + one binary dump per parameter."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, arr in model.parameters().items():
        filename = name.replace(".", "_") + ".trbt"
        save_tensor(directory / filename, arr)
        files[name] = filename
    manifest = {
        "format": "vidattn-checkpoint",
        "version": 1,
        "config": _config_to_json(model.config),
        "tensors": files,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory):
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise ContractError(f"checkpoint not found at {directory}")
    manifest = json.loads(manifest_path.read_text())
    model = VideoClassifier(_config_from_json(manifest["config"]))
    params = model.parameters()
    for name, filename in manifest["tensors"].items():
        params[name][...] = load_tensor(directory / filename)
    return model
