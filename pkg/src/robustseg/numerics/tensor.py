"""Tensor validation and the little-endian binary tensor format.

Tensors are plain ``float64`` numpy arrays. Exported helpers freeze them
(``writeable=False``) so values handed between stages stay immutable.

Record layout (all little-endian)::

    b"TNSR" | u16 version | u16 ndim | u64 extent * ndim | u64 count | f64 * count
"""

from __future__ import annotations

import struct

import numpy as np

TENSOR_MAGIC = b"TNSR"
TENSOR_VERSION = 1


class FormatError(ValueError):
    """Raised when a serialized artifact is malformed, truncated or mismatched."""


def as_tensor(x, *, copy: bool = False) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True) if copy else np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


def encode_tensor(x) -> bytes:
    arr = np.ascontiguousarray(x, dtype="<f8")
    if arr.ndim == 0:
        arr = arr.reshape(1)
    header = TENSOR_MAGIC + struct.pack("<HH", TENSOR_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<Q", arr.size)
    return header + arr.tobytes(order="C")


def decode_tensor(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Parse one tensor record starting at ``offset``; return it and the next offset."""
    def take(n: int, field: str) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise FormatError(f"truncated tensor record while reading {field}")
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    if take(4, "magic") != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    version, ndim = struct.unpack("<HH", take(4, "version/ndim"))
    if version != TENSOR_VERSION:
        raise FormatError(f"tensor format version {version} != {TENSOR_VERSION}")
    if ndim == 0 or ndim > 8:
        raise FormatError(f"corrupted tensor header field 'ndim' = {ndim}")
    shape = struct.unpack(f"<{ndim}Q", take(8 * ndim, "shape"))
    if any(s == 0 for s in shape):
        raise FormatError(f"corrupted tensor header field 'shape' = {shape}")
    (count,) = struct.unpack("<Q", take(8, "count"))
    if count != int(np.prod(shape, dtype=np.int64)):
        raise FormatError(f"corrupted tensor header field 'shape': {shape} does not hold count={count}")
    data = np.frombuffer(take(8 * count, "data"), dtype="<f8").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(data)):
        raise FormatError("tensor payload contains non-finite values")
    return data, offset
