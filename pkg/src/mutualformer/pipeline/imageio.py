"""Binary PGM (P5) and PPM (P6) files, maxval 255."""
from __future__ import annotations

import re

import numpy as np

from ..errors import UsageError


def to_bytes(arr) -> np.ndarray:
    """Quantise [0, 1] floats to uint8 (round half up); uint8 passes through."""
    arr = np.asarray(arr)
    if arr.dtype == np.uint8:
        return arr
    return np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode(arr) -> bytes:
    data = to_bytes(arr)
    if data.ndim == 2:
        magic = b"P5"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"P6"
    else:
        raise UsageError(f"cannot store array of shape {data.shape} as PGM/PPM")
    h, w = data.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode(blob: bytes) -> np.ndarray:
    """Inverse of :func:`encode`; returns uint8 (h, w) or (h, w, 3)."""
    m = re.match(rb"(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise UsageError("not a binary PGM/PPM file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise UsageError(f"unsupported maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    body = blob[m.end():m.end() + w * h * channels]
    if len(body) != w * h * channels:
        raise UsageError("truncated image data")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w)).copy()


def write_image(path, arr) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(arr))


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read())
