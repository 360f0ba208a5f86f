"""Binary tensor container.

Layout (all integers little-endian u32)::

    b"TCAE" | version | count | { name_len | utf-8 name | ndim | dims... | f32 payload }*

Readers reject any version other than :data:`VERSION`.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TCAE"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        if arr.ndim:
            buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic bytes")
    if len(blob) < 12:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + n].decode("utf-8")
            off += n
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
            off += 4 * ndim
            size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            nbytes = 4 * size
            if off + nbytes > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
            off += nbytes
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = arr.astype(np.float32)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if off != len(blob):
        raise CheckpointError("trailing bytes after last tensor")
    return out


def save(path: str | os.PathLike, tensors: Mapping[str, np.ndarray],
         config: dict | None = None) -> Path:
    """Write tensors atomically; ``config`` goes to a JSON sidecar with the same stem."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)
    if config is not None:
        sidecar_path(path).write_text(json.dumps(config, indent=2, sort_keys=True))
    return path


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def sidecar_path(path: str | os.PathLike) -> Path:
    return Path(path).with_suffix(".json")


def load_config(path: str | os.PathLike) -> dict:
    return json.loads(sidecar_path(path).read_text())


def file_hash(path: str | os.PathLike) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
