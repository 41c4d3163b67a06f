"""VOXCKPT1 checkpoint files.

Layout (little-endian)::

    b"VOXCKPT1"
    u32 digest length, digest bytes (utf-8 config digest)
    u32 tensor count
    per tensor:
        u32 name length, name bytes (utf-8)
        u8  bytes per element (4 = float32, 8 = float64)
        u32 ndim, u32 dims[ndim]
        raw data, C order

Network parameters keep their own names; optimizer state lives under
``opt.*`` and loop bookkeeping under ``meta.*``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamW

MAGIC = b"VOXCKPT1"
_DTYPES = {4: "<f4", 8: "<f8"}
_OPT_SCALARS = ("lr", "total_steps", "weight_decay", "warmup", "beta1", "beta2", "eps", "step_count")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    digest: str
    params: dict[str, np.ndarray]
    optimizer: AdamW | None = None
    meta: dict[str, float] = field(default_factory=dict)


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    width = 8 if arr.dtype == np.float64 else 4
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", width, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[width]).tobytes()


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    tensors = dict(ckpt.params)
    opt = ckpt.optimizer
    if opt is not None:
        for key in _OPT_SCALARS:
            tensors[f"opt.{key}"] = np.array([float(getattr(opt, key))])
        for name, m in opt.m.items():
            tensors[f"opt.m.{name}"] = m
        for name, v in opt.v.items():
            tensors[f"opt.v.{name}"] = v
    for key, value in ckpt.meta.items():
        tensors[f"meta.{key}"] = np.array([float(value)])
    digest = ckpt.digest.encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", len(digest)), digest, struct.pack("<I", len(tensors))]
    chunks += [_pack_tensor(name, arr) for name, arr in tensors.items()]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(8) != MAGIC:
        raise CheckpointError(f"{path}: not a VOXCKPT1 file")
    (n,) = r.unpack("<I")
    digest = r.take(n).decode("utf-8")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8")
        width, ndim = r.unpack("<BI")
        if width not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name} has unsupported width {width}")
        shape = r.unpack(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(width * size), dtype=_DTYPES[width]).reshape(shape)
        tensors[name] = data.astype(data.dtype.newbyteorder("="))
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")

    params = {k: v for k, v in tensors.items() if not k.startswith(("opt.", "meta."))}
    meta = {k[5:]: float(v[0]) for k, v in tensors.items() if k.startswith("meta.")}
    optimizer = None
    if "opt.step_count" in tensors:
        scalars = {key: float(tensors[f"opt.{key}"][0]) for key in _OPT_SCALARS}
        scalars["total_steps"] = int(scalars["total_steps"])
        scalars["step_count"] = int(scalars["step_count"])
        optimizer = AdamW(**scalars)
        optimizer.m = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.m.")}
        optimizer.v = {k[6:]: v for k, v in tensors.items() if k.startswith("opt.v.")}
    return Checkpoint(digest, params, optimizer, meta)
