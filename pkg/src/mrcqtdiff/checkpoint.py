"""Little-endian binary checkpoints.

Layout::

    magic   8 bytes  b"MRCQTCKP"
    version u32
    config  u32 length + UTF-8 text (canonical RunConfig dump)
    meta    u32 length + UTF-8 JSON (sorted keys): iteration, optimizer step, rng state
    count   u32
    count x tensor:
        u16 name length, UTF-8 name
        u8 dtype tag (1 = float32, 2 = float64), u8 rank, rank x u32 dims
        raw little-endian data

Tensors are written in sorted name order with the prefixes ``raw/``,
``ema/``, ``adam_m/`` and ``adam_v/``, so saving what was loaded reproduces
the same bytes.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError

MAGIC = b"MRCQTCKP"
VERSION = 1
_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_DTYPES = {v: k for k, v in _TAGS.items()}
PREFIXES = ("raw", "ema", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    raw: dict[str, np.ndarray]
    ema: dict[str, np.ndarray]
    adam_step: int = 0
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def metadata(self) -> dict:
        out = dict(self.meta)
        out.update(iteration=self.iteration, adam_step=self.adam_step, format_version=VERSION)
        return out


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for text in (ckpt.config_text, json.dumps(ckpt.metadata(), sort_keys=True)):
        raw = text.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    tensors = {}
    for prefix in PREFIXES:
        for name, arr in getattr(ckpt, prefix).items():
            tensors[f"{prefix}/{name}"] = arr
    parts.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _TAGS:
            raise FormatError(f"tensor {name}: unsupported dtype {arr.dtype}")
        enc = name.encode("utf-8")
        parts += [struct.pack("<H", len(enc)), enc, struct.pack("<BB", _TAGS[dt], arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), np.ascontiguousarray(arr, dtype=dt).tobytes()]
    return b"".join(parts)


class _Reader:
    def __init__(self, data, source):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.source}: truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes, source: str = "<bytes>") -> Checkpoint:
    r = _Reader(data, source)
    if r.take(8, "magic") != MAGIC:
        raise FormatError(f"{source}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"{source}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I", "config length")
    config_text = r.take(n, "config").decode("utf-8")
    (n,) = r.unpack("<I", "metadata length")
    meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    (count,) = r.unpack("<I", "tensor count")
    trees = {p: {} for p in PREFIXES}
    for _ in range(count):
        (n,) = r.unpack("<H", "tensor name length")
        name = r.take(n, "tensor name").decode("utf-8")
        tag, rank = r.unpack("<BB", f"header of {name}")
        if tag not in _DTYPES:
            raise FormatError(f"{source}: tensor {name} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        dt = _DTYPES[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"data of {name}"), dtype=dt).reshape(dims).copy()
        prefix, _, key = name.partition("/")
        if prefix not in trees:
            raise FormatError(f"{source}: tensor {name} has unknown prefix")
        trees[prefix][key] = arr
    if r.pos != len(data):
        raise FormatError(f"{source}: {len(data) - r.pos} trailing bytes")
    iteration = meta.pop("iteration")
    adam_step = meta.pop("adam_step")
    meta.pop("format_version", None)
    return Checkpoint(config_text, iteration, trees["raw"], trees["ema"], adam_step,
                      trees["adam_m"], trees["adam_v"], meta)


def save_checkpoint(path, ckpt: Checkpoint):
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read(), str(path))
