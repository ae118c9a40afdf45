"""Named-tensor container ("CKPT"): checkpoints and exported similarity matrices.

Layout (little-endian): magic ``CKPT``, u32 version, u32 tensor count; per tensor
u32 name length, UTF-8 name, u32 ndim, u32 dims, f32 data; then a u32-length
UTF-8 snapshot string and a CRC32 over every preceding byte.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"CKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    snapshot: dict = field(default_factory=dict)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        p = prefix + "."
        return {k[len(p) :]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(ckpt.tensors))]
    for name, arr in ckpt.tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    snap = json.dumps(ckpt.snapshot, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(snap)) + snap)
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise CheckpointFormatError("not a checkpoint (bad magic)")
    if len(buf) < 16:
        raise CheckpointIntegrityError("checkpoint truncated")
    body, crc = buf[:-4], struct.unpack("<I", buf[-4:])[0]
    version = struct.unpack("<I", buf[4:8])[0]
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointIntegrityError("checkpoint CRC mismatch (corrupt or truncated)")
    pos = 8

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointIntegrityError("checkpoint truncated")
        out = body[pos : pos + n]
        pos += n
        return out

    def u32() -> int:
        return struct.unpack("<I", take(4))[0]

    tensors: dict[str, np.ndarray] = {}
    for _ in range(u32()):
        name = take(u32()).decode("utf-8")
        ndim = u32()
        shape = tuple(u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    snapshot = json.loads(take(u32()).decode("utf-8"))
    return Checkpoint(tensors, snapshot)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    Path(path).write_bytes(encode(ckpt))


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())
