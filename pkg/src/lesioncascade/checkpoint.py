"""Parameter checkpoint container.

Layout (all integers little-endian)::

    magic        8 bytes   b"LCCKPT\\0\\0"
    version      uint32    currently 1
    meta_len     uint32
    meta         meta_len bytes of UTF-8 JSON (model config, free-form extras)
    count        uint32    number of tensors
    count x entry:
        name_len uint16, name (UTF-8)
        dtype    uint8     0 = float32, 1 = float64
        ndim     uint8
        dims     ndim x uint32
        nbytes   uint64
        data     nbytes raw little-endian element bytes, C order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

__all__ = ["MAGIC", "VERSION", "save_checkpoint", "load_checkpoint", "CheckpointError"]

MAGIC = b"LCCKPT\x00\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    meta_bytes = json.dumps(dict(meta or {}), sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)) + raw)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    blob = Path(path).read_bytes()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated")
        values = struct.unpack_from(fmt, blob, pos)
        pos += size
        return values

    version, meta_len = take("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    meta = json.loads(blob[pos : pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = blob[pos : pos + name_len].decode("utf-8")
        pos += name_len
        code, ndim = take("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: {name} has unknown dtype code {code}")
        dims = take(f"<{ndim}I")
        (nbytes,) = take("<Q")
        dtype = _DTYPES[code]
        if nbytes != int(np.prod(dims, dtype=np.int64)) * dtype.itemsize or pos + nbytes > len(blob):
            raise CheckpointError(f"{path}: {name} byte count does not match shape {dims}")
        tensors[name] = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    return tensors, meta
