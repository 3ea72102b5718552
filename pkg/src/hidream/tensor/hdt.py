"""HDT1 tensor files.

Layout: magic ``HDT1``, one dtype byte (0=f32, 1=f64), little-endian u32 rank,
rank x u32 extents, then the row-major little-endian payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HDT1"
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class HdtFormatError(ValueError):
    pass


def to_bytes(arr) -> bytes:
    arr = np.asarray(getattr(arr, "data", arr))
    if arr.dtype not in _CODES:
        raise HdtFormatError(f"unsupported dtype {arr.dtype}")
    code = _CODES[arr.dtype]
    header = MAGIC + bytes([code]) + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 9 or buf[:4] != MAGIC:
        raise HdtFormatError(f"{source}: bad magic")
    code = buf[4]
    if code not in _DTYPES:
        raise HdtFormatError(f"{source}: unknown dtype code {code}")
    (rank,) = struct.unpack_from("<I", buf, 5)
    off = 9 + 4 * rank
    if len(buf) < off:
        raise HdtFormatError(f"{source}: truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    dt = _DTYPES[code]
    count = int(np.prod(shape)) if rank else 1
    if len(buf) != off + count * dt.itemsize:
        raise HdtFormatError(f"{source}: payload size mismatch")
    arr = np.frombuffer(buf, dtype=dt, count=count, offset=off).reshape(shape)
    return arr.astype(dt.newbyteorder("="), copy=True)


def save(path, arr) -> None:
    path = Path(path)
    try:
        path.write_bytes(to_bytes(arr))
    except OSError as e:
        raise OSError(f"cannot write tensor file {path}: {e}") from e


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read tensor file {path}: {e}") from e
    return from_bytes(buf, str(path))
