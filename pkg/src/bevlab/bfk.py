"""BFK1 binary tensor files: magic "BFK1", u32 rank, u32 extents[rank],
then little-endian float32 values in row-major order. Used by the CLI for
feature-map dumps and fixtures."""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"BFK1"


def save(path, tensor):
    arr = np.ascontiguousarray(tensor, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def load(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a BFK1 file")
    (rank,) = struct.unpack_from("<I", raw, 4)
    shape = struct.unpack_from(f"<{rank}I", raw, 8)
    offset = 8 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if data.size != count:
        raise ValueError(f"{path}: truncated BFK1 payload")
    return data.reshape(shape).astype(np.float64)
