"""GLT1 binary tensor files.

Layout (little-endian): magic ``b"GLT1"``, version u16, rank u8, ``rank`` u32
extents, then the values as float32 in row-major order.
"""

from __future__ import annotations

import io
import os
import struct
from typing import BinaryIO

import numpy as np

from .errors import BadMagicError, CorruptCheckpointError, VersionMismatchError

MAGIC = b"GLT1"
VERSION = 1
_HEADER = struct.Struct("<4sHB")


def write_tensor(fh: BinaryIO, array: np.ndarray) -> None:
    arr = np.array(array, dtype="<f4", order="C")  # ascontiguousarray would promote 0-d to 1-d
    if arr.ndim > 255:
        raise ValueError("rank above 255 is not representable")
    fh.write(_HEADER.pack(MAGIC, VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CorruptCheckpointError(f"corrupt checkpoint: expected {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic, version, rank = _HEADER.unpack(_read_exact(fh, _HEADER.size))
    if magic != MAGIC:
        raise BadMagicError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported GLT1 version {version}")
    shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank))
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    data = np.frombuffer(_read_exact(fh, 4 * count), dtype="<f4")
    return data.reshape(shape).astype(np.float32)


def save_glt(path: str | os.PathLike, array: np.ndarray) -> None:
    buf = io.BytesIO()
    write_tensor(buf, array)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_glt(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise CorruptCheckpointError(f"corrupt tensor file {path}: trailing bytes")
    return arr
