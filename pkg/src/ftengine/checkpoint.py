"""Bit-exact binary weight snapshots.

File layout (all integers little-endian):

    "FTW1"                                  magic, 4 bytes
    u32   tensor count
    per tensor:
        u16   name length, then UTF-8 name
        u8    rank
        u32 x rank   extents
        f32 x prod(extents)   values, row-major
    u16   meta count
    per entry: u16 key length, UTF-8 key, u16 value length, UTF-8 value
    u32   CRC32 of every preceding byte

Tensor payloads are always float32; saving a float64 network narrows it.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import CorruptFileError, MissingTensorError, ShapeMismatchError
from .tensor import Tensor

MAGIC = b"FTW1"


@dataclass
class Checkpoint:
    tensors: dict = field(default_factory=dict)  # name -> Tensor (float32)
    meta: dict = field(default_factory=dict)  # str -> str


def snapshot(net, meta=None, extra=None):
    """Copy a network's parameters (plus optional extra tensors, e.g.
    optimizer slots) into an in-memory Checkpoint."""
    tensors = {
        name: Tensor(t.data.astype(np.float32, copy=True), name=name)
        for name, t in net.params.items()
    }
    if extra:
        for name, t in extra.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t)
            tensors[name] = Tensor(data.astype(np.float32, copy=True), name=name)
    return Checkpoint(tensors=tensors, meta=dict(meta or {}))


def serialize(ckpt):
    parts = [MAGIC, struct.pack("<I", len(ckpt.tensors))]
    for name, t in ckpt.tensors.items():
        nb = name.encode("utf-8")
        data = np.asarray(t.data, dtype="<f4")
        if data.ndim and not data.flags["C_CONTIGUOUS"]:
            data = np.ascontiguousarray(data)
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    parts.append(struct.pack("<H", len(ckpt.meta)))
    for key, value in ckpt.meta.items():
        kb, vb = key.encode("utf-8"), str(value).encode("utf-8")
        parts.append(struct.pack("<H", len(kb)))
        parts.append(kb)
        parts.append(struct.pack("<H", len(vb)))
        parts.append(vb)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CorruptFileError("checkpoint truncated")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def deserialize(data):
    if len(data) < len(MAGIC) + 8:
        raise CorruptFileError("checkpoint too short")
    if data[:4] != MAGIC:
        raise CorruptFileError(f"bad magic {data[:4]!r}")
    body, (stored_crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise CorruptFileError("CRC mismatch")

    r = _Reader(body)
    r.take(4)
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape)
        tensors[name] = Tensor(arr.astype(np.float32), name=name)
    (mcount,) = r.unpack("<H")
    meta = {}
    for _ in range(mcount):
        (klen,) = r.unpack("<H")
        key = r.take(klen).decode("utf-8")
        (vlen,) = r.unpack("<H")
        meta[key] = r.take(vlen).decode("utf-8")
    if r.pos != len(body):
        raise CorruptFileError(f"{len(body) - r.pos} trailing bytes")
    return Checkpoint(tensors=tensors, meta=meta)


def write_checkpoint(ckpt, path):
    with open(path, "wb") as f:
        f.write(serialize(ckpt))


def save_checkpoint(net, meta, path, extra=None):
    write_checkpoint(snapshot(net, meta, extra), path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        return deserialize(f.read())


def apply_checkpoint(net, ckpt, strict=False):
    """Copy matching tensors into the network's parameter buffers.

    strict requires every network parameter to be present. Non-strict skips
    absent names (loading a backbone-only checkpoint into a grafted network).
    Returns the number of parameters loaded.
    """
    count = 0
    for name, param in net.params.items():
        src = ckpt.tensors.get(name)
        if src is None:
            if strict:
                raise MissingTensorError(f"checkpoint lacks tensor {name!r}")
            continue
        if src.data.shape != param.data.shape:
            raise ShapeMismatchError(
                f"{name}: checkpoint shape {src.data.shape} != network {param.data.shape}"
            )
        param.data[...] = src.data.astype(net.dtype, copy=False)
        count += 1
    return count
