"""TSR1 tensor file format (bit-exact).

Layout: magic b"TSR1", u8 dtype code (0 = float32, 1 = float64), u8 rank,
rank x u64 little-endian extents, then the row-major payload in
little-endian floats.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"TSR1"
_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class TsrFormatError(ValueError):
    """Malformed TSR1 payload; message carries the failing byte offset."""


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.ascontiguousarray(t)
    if arr.dtype not in _CODE_FOR:
        raise TypeError(f"TSR1 stores float32/float64 only, got {arr.dtype}")
    code = _CODE_FOR[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return header + payload


def tensor_from_bytes(buf: bytes) -> Tensor:
    if len(buf) < 6:
        raise TsrFormatError(f"truncated header: {len(buf)} bytes, need at least 6 (offset {len(buf)})")
    if buf[:4] != MAGIC:
        raise TsrFormatError(f"bad magic {buf[:4]!r} at byte 0")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in _DTYPE_CODES:
        raise TsrFormatError(f"unknown dtype code {code} at byte 4")
    offset = 6
    need = offset + 8 * rank
    if len(buf) < need:
        raise TsrFormatError(f"truncated extents: have {len(buf)} bytes, need {need} (offset {len(buf)})")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset = need
    dtype = _DTYPE_CODES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = offset + count * dtype.itemsize
    if len(buf) != need:
        raise TsrFormatError(
            f"payload size mismatch: have {len(buf)} bytes, expected {need} (payload starts at byte {offset})"
        )
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset).reshape(shape)
    return Tensor._wrap(arr.astype(dtype.newbyteorder("="), copy=True))


def write_tsr(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tsr(path) -> Tensor:
    p = Path(path)
    try:
        buf = p.read_bytes()
    except OSError as e:
        raise TsrFormatError(f"cannot read {p}: {e}") from e
    try:
        return tensor_from_bytes(buf)
    except TsrFormatError as e:
        raise TsrFormatError(f"{p}: {e}") from None
