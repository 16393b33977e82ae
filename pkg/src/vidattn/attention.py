"""Per-frame spatial self-attention over video feature volumes.

The block slices a C x T x H x W volume into frames, computes an N x N
attention map per frame (N = H*W) from two learned positionwise projections,
mixes value features extracted by a small 3-D convolution, projects back to C
channels, and adds the result to the input scaled by a learnable scalar that
starts at zero, so a freshly built block is exactly the identity.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ParameterError, ShapeError
from .tensorio import load_tensor, save_tensor

__all__ = ["TemporalAttentionBlock"]


def _as_rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


class TemporalAttentionBlock:
    """Self-attention residual block acting independently on each frame.

    Parameters: query/key projections ``w_f``/``w_g`` (inner x C), value
    convolution kernel ``w_h`` (inner x C x k x k x k), output projection
    ``w_v`` (C x inner), and the residual scale ``gamma`` (scalar, init 0).
    ``inner`` defaults to C/8 and C must be divisible by 8 unless an explicit
    ``inner_channels`` override is given.
    """

    def __init__(self, channels, inner_channels=None, value_kernel=1, rng=0):
        if inner_channels is None:
            if channels % 8 != 0:
                raise ParameterError(
                    f"channels must be divisible by 8 (got {channels}); "
                    "pass inner_channels to override")
            inner_channels = channels // 8
        if inner_channels < 1:
            raise ParameterError("inner_channels must be >= 1")
        if value_kernel % 2 != 1:
            raise ParameterError("value_kernel must be odd to preserve extents")
        rng = _as_rng(rng)
        self.channels = channels
        self.inner_channels = inner_channels
        self.value_kernel = value_kernel
        scale = 0.05
        self.w_f = rng.normal(0.0, scale, (inner_channels, channels))
        self.w_g = rng.normal(0.0, scale, (inner_channels, channels))
        self.w_h = rng.normal(0.0, scale,
                              (inner_channels, channels) + (value_kernel,) * 3)
        self.w_v = rng.normal(0.0, scale, (channels, inner_channels))
        self.gamma = np.zeros(())

    def parameters(self):
        return {"w_f": self.w_f, "w_g": self.w_g, "w_h": self.w_h,
                "w_v": self.w_v, "gamma": self.gamma}

    def _check_channels(self, got):
        if got != self.channels:
            raise ShapeError(
                f"input has {got} channels, block was built for {self.channels}")

    def attention_map(self, tape, x_t):
        """Row-stochastic N x N map for one frame given as a C x N slice.

        Entry (j, i) weights location i's contribution to output location j;
        each row is a softmax over i of the bilinear scores between the two
        projected feature spaces.
        """
        x_t = x_t if isinstance(x_t, ad.DiffTensor) else ad.constant(x_t)
        if x_t.data.ndim != 2:
            raise ShapeError(f"frame slice must be CxN, got {x_t.data.shape}")
        self._check_channels(x_t.data.shape[0])
        w_f = tape.watch_param(self.w_f)
        w_g = tape.watch_param(self.w_g)
        f = ad.matmul(w_f, x_t)
        g = ad.matmul(w_g, x_t)
        scores = ad.matmul(ad.transpose(f), g)  # scores[i, j] = f_i . g_j
        return ad.softmax_rows(ad.transpose(scores))

    def attention_maps(self, tape, x):
        c, t, h, w = x.data.shape
        n = h * w
        return [self.attention_map(tape, ad.reshape(ad.slice_axis(x, 1, i), (c, n)))
                for i in range(t)]

    def value_features(self, tape, x):
        """Value path: one 3-D convolution over the whole volume, inner x T x H x W."""
        w_h = tape.watch_param(self.w_h)
        return ad.conv3d(x, w_h, stride=1, padding=self.value_kernel // 2)

    def attend_values(self, tape, x, maps):
        """Mix value features with the per-frame maps; returns inner x T x N."""
        c, t, h, w = x.data.shape
        if len(maps) != t:
            raise ShapeError(f"{len(maps)} attention maps for {t} frames")
        n = h * w
        values = self.value_features(tape, x)
        frames = []
        for i, alpha in enumerate(maps):
            h_t = ad.reshape(ad.slice_axis(values, 1, i), (self.inner_channels, n))
            frames.append(ad.matmul(h_t, ad.transpose(alpha)))
        return ad.stack_axis(frames, axis=1)

    def forward(self, tape, x):
        """Residual output: gamma * project(attended values) + x, same shape as x."""
        x = x if isinstance(x, ad.DiffTensor) else ad.constant(x)
        if x.data.ndim != 4:
            raise ShapeError(f"expected CxTxHxW volume, got {x.data.shape}")
        self._check_channels(x.data.shape[0])
        c, t, h, w = x.data.shape
        maps = self.attention_maps(tape, x)
        mixed = self.attend_values(tape, x, maps)
        w_v = tape.watch_param(self.w_v)
        flat = ad.reshape(mixed, (self.inner_channels, t * h * w))
        projected = ad.reshape(ad.matmul(w_v, flat), (c, t, h, w))
        gamma = tape.watch_param(self.gamma)
        return ad.add(ad.mul(gamma, projected), x)

    def save(self, directory):
        """Write parameters as binary dumps plus a manifest of names and sizes."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for name, arr in self.parameters().items():
            filename = f"{name}.trbt"
            save_tensor(directory / filename, arr)
            files[name] = filename
        manifest = {
            "channels": self.channels,
            "inner_channels": self.inner_channels,
            "value_kernel": self.value_kernel,
            "tensors": files,
        }
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory):
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        block = cls(manifest["channels"], manifest["inner_channels"],
                    manifest["value_kernel"])
        for name, filename in manifest["tensors"].items():
            loaded = load_tensor(directory / filename)
            getattr(block, name)[...] = loaded
        return block
