"""Saliency evaluation: MAE, PR curve, max F-measure, S-measure, max E-measure.

Reference definitions (all maps are h x w, pred in [0, 1], gt binary):

Thresholds
    t_k = k / 255 for k = 0..255; a pixel is predicted foreground iff pred >= t_k.

PR curve
    P = TP / (TP + FP), R = TP / (TP + FN). With no predicted positives P := 1,
    R := 0. An empty gt has no defined recall and raises MetricUndefinedError.

F-measure
    F = (1 + b2) P R / (b2 P + R) with b2 = 0.3, and F := 0 when the
    denominator is 0. F_max is the max over thresholds of one image's curve;
    a dataset score averages per-image maxima (or, optionally, maximises the
    mean curve).

S-measure, S = a * S_object + (1 - a) * S_region with a = 0.5
    m = mean(gt). If m == 0: S = 1 - mean(pred). If m == 1: S = mean(pred).
    Otherwise S = max(0, a * S_object + (1 - a) * S_region).

    S_object = m * O(pred on fg) + (1 - m) * O((1 - pred) on bg), where for the
    values x of a region O(x) = 2 mean(x) / (mean(x)^2 + 1 + std(x) + eps),
    std with ddof = 1 (0 for a single value) and eps = 2.220446e-16.

    S_region: centroid cx = R(sum_j j * colsum_j / |fg|) + 1 and
    cy = R(sum_i i * rowsum_i / |fg|) + 1 with 0-based indices and R rounding
    half away from zero. Quadrants are rows [:cy] / [cy:] by columns [:cx] / [cx:],
    weighted by their area fraction. Per quadrant with N pixels, means x, y,
    variances sx, sy and covariance sxy (all with denominator max(N - 1, 1)):
    a = 4 x y sxy, b = (x^2 + y^2)(sx + sy); ssim = a / (b + eps) if a != 0,
    1 if a == b == 0, else 0. An empty quadrant scores 0.

E-measure
    For a binarised pred B and gt G (both 0/1), phi_B = B - mean(B),
    phi_G = G - mean(G), xi = 2 phi_B phi_G / (phi_B^2 + phi_G^2) and
    E = sum((1 + xi)^2 / 4) / N. If G is all zeros E is the fraction of
    zeros in B; if G is all ones E is the fraction of ones in B.
    E_max is the max over the 256 thresholds.
"""
from __future__ import annotations

import dataclasses

import numpy as np

from .errors import MetricUndefinedError, ShapeError

BETA2 = 0.3
ALPHA = 0.5
EPS = np.spacing(1.0)
THRESHOLDS = np.arange(256) / 255.0


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and mask {gt.shape} differ in shape")
    if pred.ndim != 2:
        raise ShapeError(f"expected 2-D maps, got {pred.shape}")
    if not np.all(np.isfinite(pred)) or pred.size and (pred.min() < 0.0 or pred.max() > 1.0):
        raise ValueError("saliency map must be finite with values in [0, 1]")
    return pred, gt > 0.5


def mae(pred, gt) -> float:
    pred, g = _pair(pred, gt)
    return float(np.mean(np.abs(pred - g)))


@dataclasses.dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def _counts(pred: np.ndarray, g: np.ndarray):
    """Per-threshold (predicted positives, true positives)."""
    fg = np.sort(pred[g])
    every = np.sort(pred.ravel())
    positives = every.size - np.searchsorted(every, THRESHOLDS, side="left")
    tp = fg.size - np.searchsorted(fg, THRESHOLDS, side="left")
    return positives, tp


def pr_curves(preds, gts) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall, each (N, 256), for a stack of N equally sized maps."""
    preds = np.asarray(preds, dtype=np.float64)
    g = np.asarray(gts) > 0.5
    if preds.shape != g.shape:
        raise ShapeError(f"predictions {preds.shape} and masks {g.shape} differ in shape")
    if not np.all(np.isfinite(preds)) or preds.size and (preds.min() < 0.0 or preds.max() > 1.0):
        raise ValueError("saliency maps must be finite with values in [0, 1]")
    n = preds.shape[0]
    flat, gf = preds.reshape(n, -1), g.reshape(n, -1)
    n_fg = gf.sum(axis=1)
    if np.any(n_fg == 0):
        raise MetricUndefinedError("precision/recall undefined for an empty ground-truth mask")
    hits = flat[:, :, None] >= THRESHOLDS
    positives = hits.sum(axis=1)
    tp = (hits & gf[:, :, None]).sum(axis=1)
    precision = np.where(positives > 0, tp / np.maximum(positives, 1), 1.0)
    recall = np.where(positives > 0, tp / n_fg[:, None], 0.0)
    return precision, recall


def pr_curve(pred, gt) -> PrCurve:
    pred, g = _pair(pred, gt)
    precision, recall = pr_curves(pred[None], g[None])
    return PrCurve(THRESHOLDS.copy(), precision[0], recall[0])


def f_curve(curve, beta2: float = BETA2) -> np.ndarray:
    """F over thresholds; accepts a PrCurve or a (precision, recall) pair of arrays."""
    p, r = (curve.precision, curve.recall) if isinstance(curve, PrCurve) else curve
    den = beta2 * p + r
    return np.where(den > 0, (1 + beta2) * p * r / np.where(den > 0, den, 1.0), 0.0)


def f_measure_max(curve: PrCurve, beta2: float = BETA2) -> float:
    return float(f_curve(curve, beta2).max())


def f_measure_max_batch(precision, recall, beta2: float = BETA2) -> np.ndarray:
    return f_curve((precision, recall), beta2).max(axis=-1)


def dataset_f_max(curves, mean_curve: bool = False, beta2: float = BETA2) -> float:
    """Per-image max then mean (default), or max of the mean F curve."""
    curves = list(curves)
    if not curves:
        raise MetricUndefinedError("no curves to aggregate")
    if mean_curve:
        return float(np.mean([f_curve(c, beta2) for c in curves], axis=0).max())
    return float(np.mean([f_measure_max(c, beta2) for c in curves]))


# ---------------------------------------------------------------------------- S-measure

def _round_half_away(x: float) -> int:
    return int(np.floor(abs(x) + 0.5) * np.sign(x))


def _object_score(x: np.ndarray) -> float:
    mu = x.mean()
    sigma = x.std(ddof=1) if x.size > 1 else 0.0
    return 2.0 * mu / (mu * mu + 1.0 + sigma + EPS)


def _ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    if n == 0:
        return 0.0
    x, y = pred.mean(), gt.mean()
    dof = max(n - 1, 1)
    sx = np.sum((pred - x) ** 2) / dof
    sy = np.sum((gt - y) ** 2) / dof
    sxy = np.sum((pred - x) * (gt - y)) / dof
    a = 4.0 * x * y * sxy
    b = (x * x + y * y) * (sx + sy)
    if a != 0:
        return float(a / (b + EPS))
    return 1.0 if b == 0 else 0.0


def s_object(pred, gt) -> float:
    pred, g = _pair(pred, gt)
    m = g.mean()
    return float(m * _object_score(pred[g]) + (1 - m) * _object_score(1.0 - pred[~g]))


def centroid(gt) -> tuple[int, int]:
    """(cx, cy) split indices for the region term."""
    g = np.asarray(gt) > 0.5
    h, w = g.shape
    area = g.sum()
    cx = _round_half_away(float(np.sum(g.sum(axis=0) * np.arange(w)) / area)) + 1
    cy = _round_half_away(float(np.sum(g.sum(axis=1) * np.arange(h)) / area)) + 1
    return cx, cy


def s_region(pred, gt) -> float:
    pred, g = _pair(pred, gt)
    gf = g.astype(np.float64)
    h, w = g.shape
    cx, cy = centroid(g)
    total = 0.0
    for rows in (slice(0, cy), slice(cy, h)):
        for cols in (slice(0, cx), slice(cx, w)):
            p, q = pred[rows, cols], gf[rows, cols]
            total += q.size / (h * w) * _ssim(p, q)
    return float(total)


def s_measure(pred, gt, alpha: float = ALPHA) -> float:
    pred, g = _pair(pred, gt)
    m = g.mean()
    if m == 0:
        return float(1.0 - pred.mean())
    if m == 1:
        return float(pred.mean())
    return float(max(0.0, alpha * s_object(pred, g) + (1 - alpha) * s_region(pred, g)))


# ---------------------------------------------------------------------------- E-measure

def e_curve(pred, gt) -> np.ndarray:
    """Enhanced-alignment score at each of the 256 thresholds."""
    pred, g = _pair(pred, gt)
    n = g.size
    positives, tp = _counts(pred, g)
    positives, tp = positives.astype(np.float64), tp.astype(np.float64)
    n_fg = int(g.sum())
    if n_fg == 0:
        return (n - positives) / n
    if n_fg == n:
        return positives / n
    mb = positives / n
    mg = n_fg / n
    # pixel counts for each (B, G) combination
    combos = (
        (1.0, 1.0, tp),
        (1.0, 0.0, positives - tp),
        (0.0, 1.0, n_fg - tp),
        (0.0, 0.0, n - positives - (n_fg - tp)),
    )
    total = np.zeros_like(mb)
    for b_val, g_val, count in combos:
        pb = b_val - mb
        pg = g_val - mg
        xi = 2.0 * pb * pg / (pb * pb + pg * pg)
        total = total + count * (1.0 + xi) ** 2 / 4.0
    return total / n


def e_measure_max(pred, gt) -> float:
    return float(e_curve(pred, gt).max())


def evaluate_map(pred, gt) -> dict:
    """All four scores for one map; F_max is NaN-free only for nonempty gt."""
    return {"s_measure": s_measure(pred, gt), "f_max": f_measure_max(pr_curve(pred, gt)),
            "e_max": e_measure_max(pred, gt), "mae": mae(pred, gt)}
