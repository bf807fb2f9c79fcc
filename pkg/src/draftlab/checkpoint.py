"""Bit-exact binary checkpoints.

Layout (all integers little-endian)::

    b"DRFT"  u32 version=1  u64 step  u32 n_tensors
    n_tensors x tensor record
    u32[4]   per-group update counters (Backbone, SslHead, Adapter, AsrHead)
    optional tagged blocks, each: 4-byte tag, u32 byte length, payload
        b"OPTM": u64 adam_t, f64 beta1, f64 beta2, f64 eps, u32 n, n tensor records
        b"RNGS": UTF-8 JSON of a numpy bit-generator state
        b"META": UTF-8 JSON (model config, head kind, d_ada)

    tensor record: u16 name_len, UTF-8 name, u8 group, u8 rank, u32 dims[rank],
                   float32 data (little-endian, row-major)
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointFormatError, CorruptCheckpointError
from .optim import AdamState
from .params import Group

MAGIC = b"DRFT"
VERSION = 1


@dataclass
class Checkpoint:
    step: int
    tensors: dict[str, tuple[np.ndarray, Group]]
    counters: dict[Group, int] = field(default_factory=lambda: {g: 0 for g in Group})
    optimizer: AdamState | None = None
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    def names(self, group: Group | None = None) -> list[str]:
        return sorted(n for n, (_, g) in self.tensors.items() if group is None or g == group)


def _tensor_record(name: str, arr: np.ndarray, group: Group) -> bytes:
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", int(group), arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQI", ckpt.version, ckpt.step, len(ckpt.tensors)))
    for name in sorted(ckpt.tensors):
        arr, group = ckpt.tensors[name]
        out.write(_tensor_record(name, arr, group))
    out.write(struct.pack("<4I", *(int(ckpt.counters.get(g, 0)) for g in Group)))
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        groups = {n: g for n, (_, g) in ckpt.tensors.items()}
        recs = []
        for key, store in (("m", opt.m), ("v", opt.v)):
            for n in sorted(store):
                recs.append(_tensor_record(f"{key}/{n}", store[n], groups.get(n, Group.BACKBONE)))
        payload = struct.pack("<Qddd", opt.t, opt.beta1, opt.beta2, opt.eps) + struct.pack("<I", len(recs))
        payload += b"".join(recs)
        out.write(b"OPTM" + struct.pack("<I", len(payload)) + payload)
    for tag, obj in ((b"RNGS", ckpt.rng_state), (b"META", ckpt.meta or None)):
        if obj is not None:
            payload = json.dumps(obj, sort_keys=True).encode("utf-8")
            out.write(tag + struct.pack("<I", len(payload)) + payload)
    return out.getvalue()


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(
                f"checkpoint truncated: needed {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> tuple[str, np.ndarray, Group]:
        (n,) = self.unpack("<H")
        name = self.take(n).decode("utf-8")
        tag, rank = self.unpack("<BB")
        if tag > 3:
            raise CorruptCheckpointError(f"tensor {name!r} has invalid group tag {tag}")
        dims = self.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(dims).astype(np.float32)
        return name, arr, Group(tag)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointFormatError("bad magic bytes (expected b'DRFT')")
    version, step, n = r.unpack("<IQI")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    tensors = {}
    for _ in range(n):
        name, arr, group = r.tensor()
        if name in tensors:
            raise CorruptCheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = (arr, group)
    counters = dict(zip(Group, r.unpack("<4I")))
    ckpt = Checkpoint(int(step), tensors, counters, version=version)
    while r.pos < len(buf):
        tag = r.take(4)
        (size,) = r.unpack("<I")
        end = r.pos + size
        if end > len(buf):
            raise CorruptCheckpointError(f"block {tag!r} declares {size} bytes past end of file")
        if tag == b"OPTM":
            t, b1, b2, eps = r.unpack("<Qddd")
            (count,) = r.unpack("<I")
            opt = AdamState(b1, b2, eps, int(t))
            for _ in range(count):
                name, arr, _ = r.tensor()
                kind, pname = name.split("/", 1)
                (opt.m if kind == "m" else opt.v)[pname] = arr
            ckpt.optimizer = opt
        elif tag == b"RNGS":
            ckpt.rng_state = json.loads(r.take(size).decode("utf-8"))
        elif tag == b"META":
            ckpt.meta = json.loads(r.take(size).decode("utf-8"))
        else:
            raise CorruptCheckpointError(f"unknown block tag {tag!r}")
        if r.pos != end:
            raise CorruptCheckpointError(f"block {tag!r} length mismatch")
    return ckpt


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path, expected_d_model: int | None = None) -> Checkpoint:
    """Read a checkpoint; nothing is returned unless the whole file parses."""
    ckpt = decode_checkpoint(Path(path).read_bytes())
    if expected_d_model is not None:
        d = ckpt.meta.get("config", {}).get("d_model")
        if d is None and "encoder.ln_f.gain" in ckpt.tensors:
            d = ckpt.tensors["encoder.ln_f.gain"][0].shape[0]
        if d != expected_d_model:
            raise CheckpointFormatError(f"checkpoint d_model={d}, expected {expected_d_model}")
    return ckpt
