"""Binary checkpoint codec.

Layout (all integers little-endian)::

    b"SGLN"  u32 version
    u32 n, n bytes UTF-8 JSON config echo
    u32 tensor count
    per tensor: u32 n, n bytes UTF-8 name; u32 rank; rank x u64 extents; float32 payload

Optimizer moments, when present, are stored as extra tensors named
``optim.m/<param>`` and ``optim.v/<param>``; their scalar state lives in the
config echo under the ``"optim"`` key.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SGLN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, np.ndarray]
    optim: dict | None = None
    optim_tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def encode(ckpt: Checkpoint) -> bytes:
    echo = dict(ckpt.config)
    if ckpt.optim is not None:
        echo = {**echo, "optim": ckpt.optim}
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_str(json.dumps(echo, sort_keys=True))]
    items = list(ckpt.tensors.items()) + list(ckpt.optim_tensors.items())
    parts.append(struct.pack("<I", len(items)))
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what} "
                                  f"(need {n} bytes at offset {self.pos}, file has {len(self.buf)})")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def string(self, what: str) -> str:
        return self.take(self.u32(what), what).decode("utf-8")


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    echo = json.loads(r.string("config"))
    optim = echo.pop("optim", None)
    count = r.u32("tensor count")
    tensors, optim_tensors = {}, {}
    for _ in range(count):
        name = r.string("tensor name")
        rank = r.u32(f"rank of {name}")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank, f"extents of {name}"))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n, f"payload of {name}"), dtype="<f4").reshape(shape)
        (optim_tensors if name.startswith("optim.") else tensors)[name] = arr.astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last tensor")
    return Checkpoint(echo, tensors, optim, optim_tensors)


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


def check_compatible(ckpt: Checkpoint, expected: dict[str, tuple[int, ...]]) -> None:
    """Raise naming the first tensor whose presence or shape disagrees with ``expected``."""
    for name, shape in expected.items():
        if name not in ckpt.tensors:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        got = ckpt.tensors[name].shape
        if tuple(got) != tuple(shape):
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {tuple(got)} != model shape {tuple(shape)}")
    extra = [k for k in ckpt.tensors if k not in expected]
    if extra:
        raise CheckpointError(f"tensor {extra[0]!r} in checkpoint has no counterpart in the model")
