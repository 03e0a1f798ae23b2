"""Little-endian payload and checkpoint format.

Layout::

    "F3DP" | u16 version=1 | u16 flags | u16 L | u16 H | u16 p | u16 d_head | u16 O
    prompts   L*H*2 blocks of p*d_head f32 (layer, head, key then value)
    [flags & 1]  u16 n_tensors, then per tensor: u16 ndim, ndim * u32 extents, f32 data
    [flags & 2]  O * f64 class statistics (nan = absent class)

A checkpoint is a payload followed by a u64 round counter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"F3DP"
VERSION = 1
FLAG_HEAD = 1
FLAG_STATS = 2
_HEADER = struct.Struct("<HHHHHHH")
HEADER_SIZE = 4 + _HEADER.size


class PayloadFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


@dataclass
class Payload:
    n_layers: int
    n_heads: int
    prompt_len: int
    d_head: int
    n_classes: int
    prompts: list[np.ndarray]
    head: list[np.ndarray] | None = None
    class_stats: np.ndarray | None = None

    def parameter_count(self) -> int:
        n = sum(t.size for t in self.prompts)
        return n + (sum(t.size for t in self.head) if self.head is not None else 0)

    def tensors(self) -> list[np.ndarray]:
        return list(self.prompts) + (list(self.head) if self.head is not None else [])

    def same_layout(self, other: "Payload") -> bool:
        mine, theirs = self.tensors(), other.tensors()
        return (len(mine) == len(theirs) and all(a.shape == b.shape for a, b in zip(mine, theirs))
                and (self.class_stats is None) == (other.class_stats is None))


def _u16(name: str, v: int) -> int:
    if not 0 <= v < 1 << 16:
        raise ValueError(f"{name}={v} does not fit in u16")
    return v


def serialize_payload(payload: Payload) -> bytes:
    L, H, p, dh = payload.n_layers, payload.n_heads, payload.prompt_len, payload.d_head
    if len(payload.prompts) != L * H * 2:
        raise ValueError(f"expected {L * H * 2} prompt tensors, got {len(payload.prompts)}")
    flags = (FLAG_HEAD if payload.head is not None else 0) | (FLAG_STATS if payload.class_stats is not None else 0)
    parts = [MAGIC, _HEADER.pack(VERSION, flags, _u16("L", L), _u16("H", H), _u16("p", p),
                                 _u16("d_head", dh), _u16("O", payload.n_classes))]
    for t in payload.prompts:
        if t.shape != (p, dh):
            raise ValueError(f"prompt tensor shape {t.shape} != {(p, dh)}")
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    if payload.head is not None:
        parts.append(struct.pack("<H", _u16("n_tensors", len(payload.head))))
        for t in payload.head:
            t = np.asarray(t)
            parts.append(struct.pack("<H", _u16("ndim", t.ndim)))
            parts.append(struct.pack(f"<{t.ndim}I", *t.shape))
            parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    if payload.class_stats is not None:
        stats = np.asarray(payload.class_stats, dtype="<f8")
        if stats.shape != (payload.n_classes,):
            raise ValueError(f"class stats shape {stats.shape} != ({payload.n_classes},)")
        parts.append(stats.tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.off = 0

    def take(self, n: int, what: str) -> memoryview:
        if self.off + n > len(self.buf):
            raise PayloadFormatError(f"truncated {what}: need {n} bytes, {len(self.buf) - self.off} left", self.off)
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str, what: str):
        s = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(s, what))

    def floats(self, shape, dtype: str, what: str) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        raw = self.take(n * np.dtype(dtype).itemsize, what)
        return np.frombuffer(raw, dtype=dtype).astype(np.float64).reshape(shape)


def _read_payload(r: _Reader) -> Payload:
    if bytes(r.take(4, "magic")) != MAGIC:
        raise PayloadFormatError("bad magic", 0)
    version, flags, L, H, p, dh, O = r.unpack("<HHHHHHH", "header")
    if version != VERSION:
        raise PayloadFormatError(f"unsupported version {version}", 4)
    if flags & ~(FLAG_HEAD | FLAG_STATS):
        raise PayloadFormatError(f"unknown flag bits {flags:#x}", 6)
    prompts = [r.floats((p, dh), "<f4", "prompt tensor") for _ in range(L * H * 2)]
    head = None
    if flags & FLAG_HEAD:
        (count,) = r.unpack("<H", "tensor count")
        head = []
        for _ in range(count):
            (ndim,) = r.unpack("<H", "tensor rank")
            shape = r.unpack(f"<{ndim}I", "tensor extents")
            head.append(r.floats(shape, "<f4", "tensor data"))
    stats = r.floats((O,), "<f8", "class statistics") if flags & FLAG_STATS else None
    return Payload(L, H, p, dh, O, prompts, head, stats)


def deserialize_payload(buf: bytes) -> Payload:
    r = _Reader(buf)
    out = _read_payload(r)
    if r.off != len(r.buf):
        raise PayloadFormatError(f"{len(r.buf) - r.off} trailing bytes", r.off)
    return out


def serialize_checkpoint(payload: Payload, round_index: int) -> bytes:
    return serialize_payload(payload) + struct.pack("<Q", round_index)


def deserialize_checkpoint(buf: bytes) -> tuple[Payload, int]:
    r = _Reader(buf)
    out = _read_payload(r)
    (round_index,) = r.unpack("<Q", "round counter")
    if r.off != len(r.buf):
        raise PayloadFormatError(f"{len(r.buf) - r.off} trailing bytes", r.off)
    return out, round_index


def to_wire_precision(a: np.ndarray) -> np.ndarray:
    """Round to the values the wire can carry (float32), kept as float64."""
    return np.asarray(a, dtype=np.float32).astype(np.float64)
