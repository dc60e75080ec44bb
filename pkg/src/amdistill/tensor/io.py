"""Binary tensor format.

Layout (little-endian)::

    b"AMDT" | u8 dtype code | u8 rank | rank x u64 extents | raw row-major buffer

dtype codes: 1 = float32, 2 = float64.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Union

import numpy as np

from .core import Tensor

MAGIC = b"AMDT"
DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


class TensorFormatError(ValueError):
    pass


def dumps(t: Union[Tensor, np.ndarray]) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    try:
        code = DTYPE_CODES[arr.dtype]
    except KeyError:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}") from None
    if arr.ndim > 255:
        raise TensorFormatError("rank above 255")
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()


def loads(buf: bytes) -> Tensor:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFormatError("missing AMDT magic")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    dtype = CODE_DTYPES[code]
    off = 6 + 8 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    need = off + count * dtype.itemsize
    if len(buf) != need:
        raise TensorFormatError(f"expected {need} bytes, got {len(buf)}")
    arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=count, offset=off)
    return Tensor(arr.astype(dtype).reshape(shape))


def save(t: Union[Tensor, np.ndarray], path: Union[str, Path, BinaryIO]) -> None:
    data = dumps(t)
    if hasattr(path, "write"):
        path.write(data)
    else:
        Path(path).write_bytes(data)


def load(path: Union[str, Path, BinaryIO]) -> Tensor:
    if hasattr(path, "read"):
        return loads(path.read())
    return loads(Path(path).read_bytes())
