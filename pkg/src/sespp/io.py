"""PLTN binary tensor format and atomic file helpers.

Layout: magic ``b"PLTN"``, format version (u16), rank (u16), extents (u64
each), then the values as little-endian float32 in row-major order.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path
from typing import BinaryIO

import numpy as np

MAGIC = b"PLTN"
VERSION = 1


class FormatError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    head = MAGIC + struct.pack("<HH", VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = f.read(4)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    version, rank = struct.unpack("<HH", f.read(4))
    if version != VERSION:
        raise FormatError(f"unsupported PLTN version {version}")
    shape = struct.unpack(f"<{rank}Q", f.read(8 * rank))
    count = int(np.prod(shape)) if rank else 1
    raw = f.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError("truncated tensor payload")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)


def save_tensor(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
