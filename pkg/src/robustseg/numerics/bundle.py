"""Bundle files: one JSON metadata record followed by named tensor records.

Used for sample files, adversarial images and checkpoints::

    b"RSGB" | u32 version | u64 meta_len | meta (UTF-8 JSON) | u32 n
    then n times: u16 name_len | name | tensor record
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .tensor import FormatError, decode_tensor, encode_tensor

BUNDLE_MAGIC = b"RSGB"
BUNDLE_VERSION = 1


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode_bundle(meta: Mapping, tensors: Mapping[str, np.ndarray]) -> bytes:
    meta_bytes = canonical_json(meta).encode("utf-8")
    parts = [BUNDLE_MAGIC, struct.pack("<IQ", BUNDLE_VERSION, len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(tensors))]
    for name in tensors:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(encode_tensor(tensors[name]))
    return b"".join(parts)


def decode_bundle(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(buf) < 16 or buf[:4] != BUNDLE_MAGIC:
        raise FormatError("not a bundle file (bad magic or truncated header)")
    version, meta_len = struct.unpack_from("<IQ", buf, 4)
    if version != BUNDLE_VERSION:
        raise FormatError(f"bundle format version {version} != {BUNDLE_VERSION}")
    offset = 16
    if offset + meta_len + 4 > len(buf):
        raise FormatError("truncated bundle metadata record")
    try:
        meta = json.loads(buf[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupted bundle metadata: {exc}") from None
    offset += meta_len
    (count,) = struct.unpack_from("<I", buf, offset)
    offset += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if offset + 2 > len(buf):
            raise FormatError("truncated bundle while reading tensor name")
        (name_len,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if offset + name_len > len(buf):
            raise FormatError("truncated bundle while reading tensor name")
        name = buf[offset:offset + name_len].decode("utf-8")
        offset += name_len
        try:
            tensors[name], offset = decode_tensor(buf, offset)
        except FormatError as exc:
            raise FormatError(f"tensor {name!r}: {exc}") from None
    if offset != len(buf):
        raise FormatError(f"{len(buf) - offset} trailing bytes after last tensor")
    return meta, tensors


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_bundle(path, meta: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    write_bytes_atomic(path, encode_bundle(meta, tensors))


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    return decode_bundle(Path(path).read_bytes())
