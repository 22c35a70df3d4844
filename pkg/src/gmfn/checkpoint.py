"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"GMFN"  u32 version
    u32 len  config text (utf-8, ``key = value`` lines)
    u32 count
    count x [ u16 len, name (utf-8), u8 ndim, ndim x u32 dims, float32 data ]
    32-byte sha256 of everything above

Nothing time- or host-dependent is stored, so equal parameters and config
give equal bytes.
"""
from __future__ import annotations

import hashlib
import io
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig, loads
from .errors import CheckpointError
from .model import ParamStore

MAGIC = b"GMFN"
VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: "OrderedDict[str, np.ndarray]"
    iteration: int = 0

    def params(self, requires_grad: bool = True) -> ParamStore:
        return ParamStore.from_arrays(self.tensors, requires_grad=requires_grad)


def _config_text(cfg: RunConfig, iteration: int) -> str:
    return f"# iteration {iteration}\n" + cfg.dumps()


def to_bytes(cfg: RunConfig, tensors, iteration: int = 0) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    text = _config_text(cfg, iteration).encode("utf-8")
    buf.write(struct.pack("<I", len(text)))
    buf.write(text)
    items = list(tensors.items())
    buf.write(struct.pack("<I", len(items)))
    for name, arr in items:
        raw_name = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC) + 4 + _DIGEST:
        raise CheckpointError("checkpoint truncated")
    if data[:4] != MAGIC:
        raise CheckpointError("not a GMFN checkpoint (bad magic)")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    r = _Reader(body)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, this build reads {VERSION}")
    (text_len,) = r.unpack("<I")
    text = r.take(text_len).decode("utf-8")
    iteration = 0
    first = text.splitlines()[0] if text else ""
    if first.startswith("# iteration "):
        iteration = int(first.split()[-1])
    cfg = loads(text)
    (count,) = r.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r} in checkpoint")
        tensors[name] = arr
    if r.pos != len(body):
        raise CheckpointError(f"{len(body) - r.pos} trailing bytes after tensor table")
    return Checkpoint(cfg, tensors, iteration)


def save(path, cfg: RunConfig, params, iteration: int = 0) -> Path:
    """Write ``params`` (a ParamStore or name->array mapping) atomically."""
    tensors = params.arrays() if isinstance(params, ParamStore) else params
    data = to_bytes(cfg, tensors, iteration)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def load(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return from_bytes(data)
