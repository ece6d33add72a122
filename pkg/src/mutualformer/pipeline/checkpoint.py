"""MFCK checkpoint files.

Layout (little endian): b"MFCK", u32 version, u32 tensor count, then for each
tensor u16 name length, UTF-8 name, u8 rank, rank x u32 dims and the float64
values in row-major order; a trailing u32 CRC-32 covers every preceding byte.
The training config (as JSON bytes) and the seed travel as ``meta.*`` tensors.
"""
from __future__ import annotations

import dataclasses
import json
import struct
import zlib

import numpy as np

from ..errors import CheckpointFormatError

MAGIC = b"MFCK"
VERSION = 1
CONFIG_KEY = "meta.config"
SEED_KEY = "meta.seed"


@dataclasses.dataclass
class Checkpoint:
    tensors: dict          # name -> float64 ndarray
    config: dict
    seed: int
    version: int = VERSION


def encode(tensors: dict, config: dict | None = None, seed: int = 0) -> bytes:
    items = dict(tensors)
    cfg_bytes = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    items[CONFIG_KEY] = np.frombuffer(cfg_bytes, dtype=np.uint8).astype(np.float64)
    items[SEED_KEY] = np.array([float(seed)])
    parts = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, value in items.items():
        arr = np.asarray(value, dtype=np.float64)   # keeps rank 0, unlike ascontiguousarray
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"tensor {name!r} cannot be stored")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode(blob: bytes) -> Checkpoint:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CheckpointFormatError("not an MFCK checkpoint")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointFormatError("checksum mismatch: file is corrupt")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    pos, tensors = 12, {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + nlen].decode("utf-8")
            pos += 2 + nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * size > len(body):
                raise CheckpointFormatError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).astype(np.float64).reshape(dims)
            pos += 8 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointFormatError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointFormatError("trailing bytes after the last tensor")
    cfg = tensors.pop(CONFIG_KEY, np.zeros(0))
    seed = tensors.pop(SEED_KEY, np.zeros(1))
    config = json.loads(cfg.astype(np.uint8).tobytes().decode("utf-8")) if cfg.size else {}
    return Checkpoint(tensors, config, int(seed[0]), version)


def save(path, tensors: dict, config: dict | None = None, seed: int = 0) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(tensors, config, seed))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())
