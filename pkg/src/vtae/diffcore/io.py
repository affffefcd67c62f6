"""Flat binary tensor container.

Layout: ``b"GLT1"``, rank (u32 LE), ``rank`` extents (u32 LE), then the
row-major payload as little-endian float64.
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

MAGIC = b"GLT1"


class FormatError(ValueError):
    """Malformed tensor container."""


def dumps_tensor(array) -> bytes:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    head = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.astype("<f8").tobytes()


def loads_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    if len(blob) < 8:
        raise FormatError("truncated header")
    (rank,) = struct.unpack("<I", blob[4:8])
    off = 8 + 4 * rank
    if len(blob) < off:
        raise FormatError("truncated header")
    shape = struct.unpack(f"<{rank}I", blob[8:off])
    count = int(np.prod(shape, dtype=np.int64))
    expected = off + 8 * count
    if len(blob) != expected:
        raise FormatError(f"payload length {len(blob)} bytes, expected {expected}")
    return np.frombuffer(blob, dtype="<f8", offset=off, count=count).astype(np.float64).reshape(shape)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())
