"""Binary checkpoint container.

Layout (little-endian)::

    b"LCTX" | u32 version | str stage | str config-json | u64 vocab fingerprint
    | u32 n_tensors | n x (str name | u32 rank | rank x u64 extent | f64 data)
    | u64 checksum

``str`` is a u32 byte length followed by UTF-8 bytes. The checksum is an
8-byte BLAKE2b digest of every preceding byte.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LCTX"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


@dataclass
class ModelCheckpoint:
    stage: str
    config: dict
    tensors: dict[str, np.ndarray]
    vocab_fingerprint: int
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def check_vocab(self, fingerprint: int) -> None:
        if fingerprint != self.vocab_fingerprint:
            raise FingerprintMismatch(
                f"vocabulary fingerprint mismatch: checkpoint {self.vocab_fingerprint:016x}, "
                f"vocabulary {fingerprint:016x}")


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def to_bytes(ckpt: ModelCheckpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version), _str(ckpt.stage),
             _str(_canonical({"config": ckpt.config, "meta": ckpt.meta})),
             struct.pack("<Q", ckpt.vocab_fingerprint), struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype="<f8")  # tobytes() is C-order; keeps 0-d shape
        parts.append(_str(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    payload = b"".join(parts)
    return payload + _checksum(payload)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("unexpected end of checkpoint data")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def from_bytes(buf: bytes, expected_fingerprint: int | None = None) -> ModelCheckpoint:
    if len(buf) < len(MAGIC) + 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    payload, tail = buf[:-8], buf[-8:]
    if _checksum(payload) != tail:
        raise CheckpointError("checkpoint checksum mismatch (file truncated or corrupted)")
    r = _Reader(payload)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    stage = r.string()
    header = json.loads(r.string())
    (fingerprint,) = r.unpack("<Q")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        n = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(payload):
        raise CheckpointError("trailing bytes after tensor records")
    ckpt = ModelCheckpoint(stage, header["config"], tensors, fingerprint, header["meta"], version)
    if expected_fingerprint is not None:
        ckpt.check_vocab(expected_fingerprint)
    return ckpt


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, expected_fingerprint: int | None = None,
                    stage: str | None = None) -> ModelCheckpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    ckpt = from_bytes(buf, expected_fingerprint)
    if stage is not None and ckpt.stage != stage:
        raise CheckpointError(f"{path}: expected a {stage!r} checkpoint, found {ckpt.stage!r}")
    return ckpt
