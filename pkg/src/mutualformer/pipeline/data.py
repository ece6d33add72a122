"""Synthetic RGB-D saliency samples.

Every sample is a function of (seed, index): one to three foreground shapes
(ellipse, rectangle, triangle) drawn over a textured background. Foreground
shapes are nearer, i.e. brighter, in depth; optional distractor shapes appear
in RGB only.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from ..errors import ConfigError

KINDS = ("ellipse", "rectangle", "triangle")


@dataclasses.dataclass(frozen=True)
class Shape:
    kind: str
    cx: float
    cy: float
    a: float            # half-extent along the rotated x axis (unused for triangles)
    b: float
    angle: float = 0.0
    vertices: tuple = ()   # triangle only: ((x, y), (x, y), (x, y))

    def rasterize(self, size: int) -> np.ndarray:
        """Boolean mask of pixels whose centres fall inside the shape."""
        ys, xs = np.mgrid[0:size, 0:size] + 0.5
        if self.kind == "triangle":
            (x1, y1), (x2, y2), (x3, y3) = self.vertices
            d1 = (xs - x2) * (y1 - y2) - (x1 - x2) * (ys - y2)
            d2 = (xs - x3) * (y2 - y3) - (x2 - x3) * (ys - y3)
            d3 = (xs - x1) * (y3 - y1) - (x3 - x1) * (ys - y1)
            neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
            pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
            return ~(neg & pos)
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = (xs - self.cx) * c + (ys - self.cy) * s
        v = -(xs - self.cx) * s + (ys - self.cy) * c
        if self.kind == "ellipse":
            return (u / self.a) ** 2 + (v / self.b) ** 2 <= 1.0
        if self.kind == "rectangle":
            return (np.abs(u) <= self.a) & (np.abs(v) <= self.b)
        raise ConfigError(f"unknown shape kind {self.kind!r}")


@dataclasses.dataclass
class SaliencySample:
    rgb: np.ndarray     # (h, w, 3) in [0, 1]
    depth: np.ndarray   # (h, w) in [0, 1]
    mask: np.ndarray    # (h, w) in {0, 1}
    index: int = 0


def random_shape(rng: np.random.Generator, size: int, kind: str | None = None) -> Shape:
    kind = kind or KINDS[int(rng.integers(len(KINDS)))]
    lo, hi = 0.10 * size, 0.24 * size
    cx, cy = rng.uniform(0.25 * size, 0.75 * size, size=2)
    if kind == "triangle":
        r = rng.uniform(lo, hi) * 1.3
        phase = rng.uniform(0, 2 * np.pi)
        angles = phase + np.array([0.0, 2.1, 4.2]) + rng.uniform(-0.3, 0.3, 3)
        verts = tuple((float(cx + r * np.cos(t)), float(cy + r * np.sin(t))) for t in angles)
        return Shape(kind, float(cx), float(cy), r, r, 0.0, verts)
    a, b = rng.uniform(lo, hi, size=2)
    return Shape(kind, float(cx), float(cy), float(a), float(b), float(rng.uniform(0, np.pi)))


def _texture(rng, size: int, base: np.ndarray, strength: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] / size
    fx, fy = rng.uniform(2, 8, size=2)
    stripes = np.sin(2 * np.pi * (fx * xs + fy * ys) + rng.uniform(0, 2 * np.pi))
    grad = rng.uniform(-0.5, 0.5, size=3)[None, None, :] * (xs[..., None] - 0.5)
    noise = rng.normal(0, 0.04, size=(size, size, 3))
    return base[None, None, :] + strength * stripes[..., None] * 0.5 + grad + noise


def render_sample(shapes, size: int, seed: int, distractors=(), index: int = 0) -> SaliencySample:
    """Render given foreground shapes (and RGB-only distractors) with texture
    and depth drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    bg_colour = rng.uniform(0.2, 0.8, size=3)
    rgb = _texture(rng, size, bg_colour, 0.15)
    ys = (np.mgrid[0:size, 0:size][0] + 0.5) / size
    near, far = rng.uniform(0.1, 0.45, size=2)
    depth = far + (near - far) * ys
    mask = np.zeros((size, size), dtype=bool)
    for shape in distractors:
        region = shape.rasterize(size)
        rgb[region] = _texture(rng, size, rng.uniform(0, 1, size=3), 0.1)[region]
    for shape in shapes:
        region = shape.rasterize(size)
        colour = np.clip(1.0 - bg_colour + rng.normal(0, 0.15, size=3), 0, 1)
        rgb[region] = _texture(rng, size, colour, 0.1)[region]
        depth[region] = rng.uniform(0.6, 0.9)
        mask |= region
    depth = depth + rng.normal(0, 0.03, size=depth.shape)
    return SaliencySample(np.clip(rgb, 0.0, 1.0), np.clip(depth, 0.0, 1.0),
                          mask.astype(np.uint8), index)


def synth_sample(seed: int, index: int, size: int, distractors: bool = True) -> SaliencySample:
    rng = np.random.default_rng([seed, index])
    count = int(rng.integers(1, 4))
    shapes = [random_shape(rng, size) for _ in range(count)]
    extra = [random_shape(rng, size) for _ in range(int(rng.integers(0, 2)))] if distractors else []
    sample = render_sample(shapes, size, int(rng.integers(2 ** 31)), extra, index)
    if not sample.mask.any():   # a shape can miss every pixel centre only in tiny images
        raise ConfigError(f"sample {index} rendered an empty mask at size {size}")
    return sample


def synth_dataset(seed: int, count: int, size: int, *, start: int = 0,
                  distractors: bool = True) -> list[SaliencySample]:
    if size < 32:
        raise ConfigError(f"image size must be at least 32, got {size}")
    if count < 1:
        raise ConfigError(f"sample count must be at least 1, got {count}")
    return [synth_sample(seed, start + i, size, distractors) for i in range(count)]


def stack(samples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays: rgb (B, h, w, 3), depth (B, h, w, 1), mask (B, h, w)."""
    rgb = np.stack([s.rgb for s in samples])
    depth = np.stack([s.depth for s in samples])[..., None]
    mask = np.stack([s.mask for s in samples]).astype(np.float64)
    return rgb, depth, mask


def augment(rng: np.random.Generator, rgb, depth, mask, *, flip: bool = True, crop: bool = True):
    """Random horizontal flip and pad-and-crop (up to size/8 pixels) per sample."""
    rgb, depth, mask = rgb.copy(), depth.copy(), mask.copy()
    size = rgb.shape[1]
    pad = max(1, size // 8)
    for i in range(rgb.shape[0]):
        if flip and rng.uniform() < 0.5:
            rgb[i], depth[i], mask[i] = rgb[i, :, ::-1], depth[i, :, ::-1], mask[i, :, ::-1]
        if crop:
            dy, dx = rng.integers(0, 2 * pad + 1, size=2)
            for arr in (rgb, depth, mask):
                widths = [(pad, pad), (pad, pad)] + [(0, 0)] * (arr.ndim - 3)
                padded = np.pad(arr[i], widths, mode="edge")
                arr[i] = padded[dy:dy + size, dx:dx + size]
    return rgb, depth, mask
