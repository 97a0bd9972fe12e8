"""Binary checkpoint format.

Layout (all integers little-endian)::

    magic "IPSEG1" | version u8
    u32 n_tensors, then per tensor: entry
    u32 n_optimizers, then per optimizer:
        u16 name_len | name | u64 step | u32 n_moments | per moment: entry (m) entry (v)
    u32 config_len | config text (utf-8)
    u32 rng_len | rng state (utf-8 json)

    entry := u16 name_len | name | u8 precision bits | u8 ndim | u32 dims[ndim] | raw values
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import OptState

MAGIC = b"IPSEG1"
VERSION = 1


class CheckpointError(ValueError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class MagicMismatchError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    optimizers: dict[str, OptState] = field(default_factory=dict)
    config_text: str = ""
    rng_state: dict = field(default_factory=dict)
    version: int = VERSION


def _name(buf: bytearray, name: str) -> None:
    raw = name.encode("utf-8")
    buf += struct.pack("<H", len(raw))
    buf += raw


def _entry(buf: bytearray, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        bits, dt = 32, "<f4"
    elif arr.dtype == np.float64:
        bits, dt = 64, "<f8"
    else:
        raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
    _name(buf, name)
    buf += struct.pack("<BB", bits, arr.ndim)
    buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
    buf += np.ascontiguousarray(arr, dtype=dt).tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    buf = bytearray(MAGIC)
    buf += struct.pack("<B", ckpt.version)
    buf += struct.pack("<I", len(ckpt.tensors))
    for name, arr in ckpt.tensors.items():
        _entry(buf, name, arr)
    buf += struct.pack("<I", len(ckpt.optimizers))
    for name, st in ckpt.optimizers.items():
        _name(buf, name)
        buf += struct.pack("<QI", st.t, len(st.m))
        for key in st.m:
            _entry(buf, key, st.m[key])
            _entry(buf, key, st.v[key])
    for text in (ckpt.config_text, json.dumps(ckpt.rng_state, sort_keys=True)):
        raw = text.encode("utf-8")
        buf += struct.pack("<I", len(raw))
        buf += raw
    return bytes(buf)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedCheckpointError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte offset {self.pos}, file has {len(self.data)}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def name(self) -> str:
        (n,) = self.unpack("<H", "name length")
        return self.take(n, "name").decode("utf-8")

    def entry(self) -> tuple[str, np.ndarray]:
        name = self.name()
        bits, ndim = self.unpack("<BB", f"header of {name}")
        if bits not in (32, 64):
            raise CheckpointError(f"{name}: bad precision tag {bits} at byte offset {self.pos - 2}")
        dims = self.unpack(f"<{ndim}I", f"dims of {name}")
        count = int(np.prod(dims)) if ndim else 1
        dt = "<f4" if bits == 32 else "<f8"
        raw = self.take(count * (bits // 8), f"values of {name}")
        arr = np.frombuffer(raw, dtype=dt).reshape(dims).astype(np.float32 if bits == 32 else np.float64)
        return name, arr


def decode_checkpoint(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise MagicMismatchError(f"not a checkpoint: magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint version {version} is not supported (expected {VERSION})")
    ckpt = Checkpoint(version=version)
    (n,) = r.unpack("<I", "tensor count")
    for _ in range(n):
        name, arr = r.entry()
        ckpt.tensors[name] = arr
    (n_opt,) = r.unpack("<I", "optimizer count")
    for _ in range(n_opt):
        opt_name = r.name()
        t, count = r.unpack("<QI", f"header of optimizer {opt_name}")
        st = OptState(t=t)
        for _ in range(count):
            key, m = r.entry()
            _, v = r.entry()
            st.m[key] = m
            st.v[key] = v
        ckpt.optimizers[opt_name] = st
    (n_cfg,) = r.unpack("<I", "config length")
    ckpt.config_text = r.take(n_cfg, "config text").decode("utf-8")
    (n_rng,) = r.unpack("<I", "rng state length")
    ckpt.rng_state = json.loads(r.take(n_rng, "rng state").decode("utf-8"))
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after byte offset {r.pos}")
    return ckpt


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
