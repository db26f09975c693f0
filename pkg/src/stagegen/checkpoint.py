"""``.sgck`` checkpoint files: named float32 tensors plus a JSON metadata block.

Layout, all integers little-endian u32::

    b"SGCK" | version | n_tensors
    n_tensors x ( name_len | name utf-8 | rank | dims[rank] | f32 payload )
    meta_len | meta JSON utf-8 (sorted keys)
    crc32 of every preceding byte
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

MAGIC = b"SGCK"
VERSION = 1
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Raised for unreadable, truncated or corrupted checkpoint files."""


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> Dict[str, np.ndarray]:
        """Tensors under ``prefix`` with the prefix stripped."""
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}


def dumps(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, _U32.pack(VERSION), _U32.pack(len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        parts += [_U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim)]
        parts += [_U32.pack(d) for d in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    meta = json.dumps(ckpt.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts += [_U32.pack(len(meta)), meta]
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def loads(data: bytes) -> Checkpoint:
    if len(data) < 16:
        raise CheckpointError("checkpoint truncated: file too short")
    if data[:4] != MAGIC:
        raise CheckpointError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    body, (crc,) = data[:-4], _U32.unpack(data[-4:])
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(body):
            raise CheckpointError("checkpoint truncated inside header")
        (v,) = _U32.unpack_from(body, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError("checksum mismatch: checkpoint is corrupted or truncated")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(u32()):
        n = u32()
        name = body[pos:pos + n].decode("utf-8")
        pos += n
        dims = tuple(u32() for _ in range(u32()))
        size = 4 * int(np.prod(dims, dtype=np.int64))
        if pos + size > len(body):
            raise CheckpointError(f"checkpoint truncated inside tensor {name!r}")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += size
    n = u32()
    meta = json.loads(body[pos:pos + n].decode("utf-8"))
    pos += n
    if pos != len(body):
        raise CheckpointError("trailing bytes after metadata block")
    return Checkpoint(tensors, meta)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return loads(data)
