"""Binary tensor dumps.

Layout (all little-endian)::

    magic     8 bytes  b"MOETNSR\\0"
    version   u32      1
    reserved  u32      0
    rank      u32
    extents   rank x u64
    dtype     u8       1 = float32, 2 = float64, 3 = int64
    values    product(extents) raw elements, row-major
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

MAGIC = b"MOETNSR\x00"
VERSION = 1

_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class TensorFormatError(ValueError):
    pass


def dump_array(arr: np.ndarray, fh: BinaryIO) -> None:
    arr = np.asarray(arr)
    le = arr.dtype.newbyteorder("<")
    if le not in _DTYPE_TAGS:
        raise TensorFormatError(f"unsupported dtype {arr.dtype}")
    fh.write(MAGIC + struct.pack("<II", VERSION, 0))
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<B", _DTYPE_TAGS[le]))
    fh.write(np.ascontiguousarray(arr, dtype=le).tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TensorFormatError("truncated tensor dump")
    return data


def load_array(fh: BinaryIO) -> np.ndarray:
    head = _read(fh, 16)
    if head[:8] != MAGIC:
        raise TensorFormatError(f"bad magic {head[:8]!r}")
    (version, _reserved) = struct.unpack("<II", head[8:])
    if version != VERSION:
        raise TensorFormatError(f"unsupported tensor dump version {version}")
    (rank,) = struct.unpack("<I", _read(fh, 4))
    shape = struct.unpack(f"<{rank}Q", _read(fh, 8 * rank))
    (tag,) = struct.unpack("<B", _read(fh, 1))
    if tag not in _TAG_DTYPES:
        raise TensorFormatError(f"unknown dtype tag {tag}")
    dtype = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = _read(fh, count * dtype.itemsize)
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
