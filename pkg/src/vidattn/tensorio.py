"""Binary tensor dumps shared by checkpoints, masks, and saliency outputs.

Layout, all little-endian: magic b"TRBT", format version (u32), rank (u32),
one u32 extent per axis, then the float64 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"TRBT"
FORMAT_VERSION = 1

__all__ = ["MAGIC", "FORMAT_VERSION", "save_tensor", "load_tensor"]


def save_tensor(path, array):
    array = np.ascontiguousarray(array, dtype=np.float64)
    header = MAGIC + struct.pack("<II", FORMAT_VERSION, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.astype("<f8").tobytes())


def load_tensor(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    version, rank = struct.unpack_from("<II", raw, 4)
    if version != FORMAT_VERSION:
        raise ContractError(f"{path}: unsupported format version {version}")
    extents = struct.unpack_from(f"<{rank}I", raw, 12)
    offset = 12 + 4 * rank
    count = int(np.prod(extents)) if rank else 1
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    if data.size != count:
        raise ContractError(f"{path}: truncated payload")
    return data.astype(np.float64).reshape(extents)
