"""Binary checkpoint format.

Layout (little-endian)::

    b"AP3DCKPT"  magic
    u32          format version
    u32          entry count
    per entry:
        u32      name length in bytes
        bytes    UTF-8 name
        u32      rank
        u64*rank extents
        f32*n    values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"AP3DCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(fh: BinaryIO, state: dict[str, np.ndarray]) -> None:
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(state)))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        stored = np.asarray(arr, dtype="<f4")
        # values are stored as f32; refuse anything that would not come back unchanged
        if not np.array_equal(stored.astype(arr.dtype), arr, equal_nan=True):
            raise CheckpointError(f"{name}: values are not exactly representable as float32")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(stored).tobytes())


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an AP3D checkpoint (bad magic)")
    version, count = struct.unpack("<II", _read(fh, 8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", _read(fh, 4))
        name = _read(fh, nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", _read(fh, 4))
        shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
        n = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(_read(fh, 4 * n), dtype="<f4").reshape(shape)
        state[name] = data.copy()
    return state


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint")
    return buf


def save(path, state: dict[str, np.ndarray]) -> None:
    with open(Path(path), "wb") as fh:
        write_checkpoint(fh, state)


def load(path) -> dict[str, np.ndarray]:
    with open(Path(path), "rb") as fh:
        return read_checkpoint(fh)
