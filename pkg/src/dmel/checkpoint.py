"""Versioned binary checkpoints.

Layout (little-endian)::

    4s   magic "DMCK"
    u32  version
    u32  metadata length, then UTF-8 JSON (model config, step, extras)
    u32  tensor count, then per tensor:
         u16 name length, name (UTF-8), u8 ndim, u32 * ndim shape,
         float32 data in row-major order
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, TruncationError, VersionError

MAGIC = b"DMCK"
VERSION = 1


def encode(meta: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(tensors))]
    for name, t in tensors.items():
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4", order="C")
        key = name.encode("utf-8")
        parts.append(struct.pack("<H", len(key)) + key)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(data: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    view = memoryview(data)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncationError("checkpoint ends early")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise VersionError(f"checkpoint version {version} (expected {VERSION})")
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2))
        name = bytes(take(klen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape).copy()
        tensors[name] = torch.from_numpy(arr)
    if pos != len(view):
        raise FormatError("trailing bytes after the last tensor")
    return meta, tensors


def save(path, meta: dict, tensors: dict[str, torch.Tensor]) -> None:
    """Write atomically: a crash mid-write never leaves a half file at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(meta, tensors))
    os.replace(tmp, path)


def load(path) -> tuple[dict, dict[str, torch.Tensor]]:
    return decode(Path(path).read_bytes())
