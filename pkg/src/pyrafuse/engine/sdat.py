"""SDAT: a tiny binary container for one dense float tensor.

Layout (little-endian throughout):
  bytes 0-3   magic "SDAT"
  byte  4     format version (0x01)
  byte  5     dtype code: 0 = float32, 1 = float64
  byte  6     rank r
  next 8*r    extents, uint64 each
  rest        row-major payload
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"SDAT"
VERSION = 1

_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    if arr.ndim:  # ascontiguousarray would promote rank 0 to rank 1
        arr = np.ascontiguousarray(arr)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise ValueError(f"SDAT stores float32/float64 only, got {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError(f"SDAT rank limit is 255, got {arr.ndim}")
    code = _DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    extents = struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    payload = arr.astype(_CODE_TO_DTYPE[code], copy=False).tobytes(order="C")
    return header + extents + payload


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 7 or buf[:4] != MAGIC:
        raise ValueError(f"{source}: not an SDAT payload (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise ValueError(f"{source}: unsupported SDAT version {version}")
    if code not in _CODE_TO_DTYPE:
        raise ValueError(f"{source}: unknown SDAT dtype code {code}")
    offset = 7
    need = offset + 8 * rank
    if len(buf) < need:
        raise ValueError(f"{source}: truncated SDAT header")
    shape = struct.unpack_from(f"<{rank}Q", buf, offset) if rank else ()
    offset = need
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for s in shape:
        count *= s
    if len(buf) - offset != count * dtype.itemsize:
        raise ValueError(
            f"{source}: payload size {len(buf) - offset} does not match "
            f"shape {tuple(shape)} ({count} x {dtype.itemsize} bytes)")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=offset)
    return arr.reshape(shape).copy()


def write_tensor(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def read_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    return decode_tensor(buf, source=str(path))
