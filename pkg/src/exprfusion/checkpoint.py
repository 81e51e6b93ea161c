"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    magic         8 bytes  b"EXFCKPT\\0"
    version       u32
    config_len    u32, then config_len bytes of UTF-8 JSON
                  {"model": <ModelConfig>, "meta": {...}}
    block_count   u32
    per block:    name_len u16, name (UTF-8), ndim u8, dims u64 * ndim,
                  prod(dims) float64 values, row-major
    checksum      32 bytes, SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from ._io import atomic_write_bytes
from .errors import CheckpointError, ConfigError
from .model import FusionModel, ModelConfig

MAGIC = b"EXFCKPT\0"
VERSION = 1
_DIGEST = 32


def encode_checkpoint(model: FusionModel, meta: dict | None = None) -> bytes:
    header = json.dumps({"model": model.config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    params = model.named_parameters()
    parts.append(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", p.ndim))
        parts.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, model: FusionModel, meta: dict | None = None) -> None:
    atomic_write_bytes(path, encode_checkpoint(model, meta))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, state)`` after verifying magic, version and checksum."""
    if len(buf) < len(MAGIC) + 8 + _DIGEST or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not an exprfusion checkpoint")
    body, digest = buf[:-_DIGEST], buf[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    r = _Reader(body)
    r.take(len(MAGIC))
    version, header_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    header = json.loads(r.take(header_len).decode())
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(r.take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after parameter blocks")
    return header, state


def load_checkpoint(path) -> tuple[FusionModel, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        header, state = decode_checkpoint(fh.read())
    try:
        model = FusionModel(ModelConfig.from_dict(header["model"]), rng=0)
        model.load_state_dict(state)
    except (ConfigError, KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from exc
    return model, header.get("meta", {})
