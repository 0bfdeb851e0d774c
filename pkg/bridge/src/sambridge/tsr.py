"""TSR1 wire format (shared with the detection pipeline): magic b"TSR1",
u8 dtype code (0=f32, 1=f64), u8 rank, rank x u64 LE extents, row-major
little-endian payload."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TSR1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tsr(path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    if arr.dtype not in _CODES:
        raise TypeError(f"TSR1 stores float32/float64 only, got {arr.dtype}")
    header = MAGIC + struct.pack("<BB", _CODES[arr.dtype], arr.ndim)
    if arr.ndim:
        header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes("C"))


def read_tsr(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {buf[:4]!r} at byte 0")
    code, rank = struct.unpack_from("<BB", buf, 4)
    shape = struct.unpack_from(f"<{rank}Q", buf, 6) if rank else ()
    dtype = _DTYPES[code]
    offset = 6 + 8 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dtype.itemsize
    if len(buf) != expected:
        raise ValueError(f"{path}: payload size {len(buf)} != expected {expected}")
    return np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape).astype(
        dtype.newbyteorder("="), copy=True
    )
