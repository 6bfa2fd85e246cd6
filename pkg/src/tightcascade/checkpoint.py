"""Binary checkpoint container for ComponentGraph.

Layout (all integers little-endian):

    magic          8 bytes   b"TCCKPT\\x00\\x01"
    version        uint32    FORMAT_VERSION
    meta_len       uint64
    meta           meta_len bytes of UTF-8 JSON: {"kind", "arch", "frozen"}
    n_tensors      uint64
    n_tensors records:
        name_len   uint32
        name       name_len bytes UTF-8
        ndim       uint32
        dims       ndim x uint64
        data       prod(dims) x float64 (<f8), row-major

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .models import ComponentGraph
from .tensor import Tensor

MAGIC = b"TCCKPT\x00\x01"
FORMAT_VERSION = 1


def atomic_write_bytes(path: str | os.PathLike, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(model: ComponentGraph) -> bytes:
    meta = {
        "kind": model.kind,
        "arch": model.arch,
        "frozen": sorted(n for n, f in model.freeze.items() if f),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<Q", len(model.params)))
    for name, t in model.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<I", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}Q", *t.data.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def loads(payload: bytes) -> ComponentGraph:
    view = memoryview(payload)
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(view):
            raise ValueError("truncated checkpoint")
        chunk = bytes(view[pos : pos + n])
        pos += n
        return chunk

    if take(len(MAGIC)) != MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (meta_len,) = struct.unpack("<Q", take(8))
    meta = json.loads(take(meta_len).decode("utf-8"))
    (count,) = struct.unpack("<Q", take(8))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        params[name] = Tensor(data, requires_grad=True)
    if pos != len(view):
        raise ValueError("trailing bytes after checkpoint")
    freeze = {n: True for n in meta.get("frozen", [])}
    return ComponentGraph(meta["kind"], params, meta["arch"], freeze)


def save_checkpoint(model: ComponentGraph, path: str | os.PathLike) -> None:
    atomic_write_bytes(path, dumps(model))


def load_checkpoint(path: str | os.PathLike) -> ComponentGraph:
    return loads(Path(path).read_bytes())
