"""Binary checkpoint format.

Layout (all integers little-endian u32, floats little-endian f64)::

    b"YFFN" | version | S | base_channels | A | K
    repeated: name_len | name (utf-8) | rank | extents... | payload
    crc32 of every preceding byte
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..numeric import Tensor
from .model import NetworkConfig, init_params

MAGIC = b"YFFN"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4s5I")
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    """Malformed checkpoint file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def initialise(cls, config: NetworkConfig, seed: int = 0, zero: bool = False) -> "Checkpoint":
        return cls(config, init_params(config, seed=seed, zero=zero))


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    cfg = ckpt.config
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, cfg.input_size, cfg.base_channels,
                          cfg.anchors_per_scale, cfg.class_count)]
    for name, t in ckpt.params.items():
        raw = name.encode("utf-8")
        parts.append(_U32.pack(len(raw)))
        parts.append(raw)
        parts.append(_U32.pack(t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + _U32.pack(zlib.crc32(body))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < _HEADER.size + 4:
        raise CheckpointError("file too short for header and checksum", len(blob))
    body_end = len(blob) - 4
    (stored,) = _U32.unpack_from(blob, body_end)
    actual = zlib.crc32(blob[:body_end])
    if stored != actual:
        raise CheckpointError(f"CRC32 mismatch: stored {stored:#010x}, computed {actual:#010x}", body_end)

    magic, version, s, base, a, k = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {version}", 4)
    try:
        config = NetworkConfig(input_size=s, base_channels=base, anchors_per_scale=a, class_count=k)
    except ValueError as exc:
        raise CheckpointError(f"invalid config block: {exc}", 8) from exc

    params: dict[str, Tensor] = {}
    pos = _HEADER.size

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > body_end:
            raise CheckpointError(f"truncated while reading {what}", pos)
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    while pos < body_end:
        start = pos
        (name_len,) = _U32.unpack(take(4, "name length"))
        try:
            name = take(name_len, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("tensor name is not valid UTF-8", start + 4) from exc
        if name in params:
            raise CheckpointError(f"duplicate tensor {name!r}", start)
        (rank,) = _U32.unpack(take(4, f"rank of {name!r}"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, f"extents of {name!r}"))
        count = int(np.prod(shape, dtype=np.int64))
        payload = take(8 * count, f"payload of {name!r}")
        data = np.frombuffer(payload, dtype="<f8").reshape(shape)
        if not np.all(np.isfinite(data)):
            raise CheckpointError(f"non-finite values in {name!r}", pos - len(payload))
        params[name] = Tensor(data)
    return Checkpoint(config, params)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
