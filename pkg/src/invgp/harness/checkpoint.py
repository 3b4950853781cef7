"""Binary checkpoints: every trainable raw tensor plus optimiser state.

Layout (all integers little-endian):

    magic   4 bytes  b"IGP1"
    version u32      currently 1
    step    u64
    config  u32 length + that many UTF-8 bytes (the serialised config)
    count   u32
    then per tensor, sorted by name:
    name    u16 length + bytes
    rank    u8
    dims    u32 per axis
    data    float64 little-endian, C order

Tensors are stored in unconstrained (raw) space and always as float64,
so a checkpoint reloads bit-for-bit on any platform and a save after a
load reproduces the identical file.
"""

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"IGP1"
VERSION = 1


class CorruptCheckpoint(Exception):
    """The file is not a readable checkpoint of a known version."""


@dataclass
class Checkpoint:
    step: int
    config_text: str
    tensors: dict


def save_checkpoint(path, step, config_text, tensors):
    blob = config_text.encode("utf-8")
    parts = [MAGIC,
             struct.pack("<I", VERSION),
             struct.pack("<Q", step),
             struct.pack("<I", len(blob)), blob,
             struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        # nb. not ascontiguousarray: that would promote rank-0 arrays to
        # rank 1, and astype below already emits C-order bytes
        arr = np.asarray(tensors[name], dtype=float)
        enc = name.encode("utf-8")
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def _take(buf, offset, n, what):
    if offset + n > len(buf):
        raise CorruptCheckpoint(f"truncated while reading {what}")
    return buf[offset:offset + n], offset + n


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    raw, off = _take(buf, 0, 4, "magic")
    if raw != MAGIC:
        raise CorruptCheckpoint(f"bad magic {raw!r}")
    raw, off = _take(buf, off, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != VERSION:
        raise CorruptCheckpoint(f"unsupported version {version}")
    raw, off = _take(buf, off, 8, "step")
    step = struct.unpack("<Q", raw)[0]
    raw, off = _take(buf, off, 4, "config length")
    raw, off = _take(buf, off, struct.unpack("<I", raw)[0], "config")
    config_text = raw.decode("utf-8")
    raw, off = _take(buf, off, 4, "tensor count")
    count = struct.unpack("<I", raw)[0]

    tensors = {}
    for _ in range(count):
        raw, off = _take(buf, off, 2, "name length")
        raw, off = _take(buf, off, struct.unpack("<H", raw)[0], "name")
        name = raw.decode("utf-8")
        raw, off = _take(buf, off, 1, "rank")
        rank = raw[0]
        raw, off = _take(buf, off, 4 * rank, "dims")
        dims = struct.unpack(f"<{rank}I", raw)
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw, off = _take(buf, off, 8 * size, f"tensor {name}")
        tensors[name] = np.frombuffer(raw, dtype="<f8").astype(float).reshape(dims)
    if off != len(buf):
        raise CorruptCheckpoint(f"{len(buf) - off} trailing bytes")
    return Checkpoint(step, config_text, tensors)
