"""Training losses: pixel-level focal regularisation of the per-level modality
heads, the pixel-position-aware saliency loss and their weighted total."""
from __future__ import annotations

import dataclasses

import numpy as np
from scipy.ndimage import uniform_filter

from . import numeric as nm
from .errors import ConfigError, ShapeError, UsageError

CLAMP = 1e-7
ALPHA_FOREGROUND = 0.25
ALPHA_BACKGROUND = 0.75
DEFAULT_WINDOW = 31
DEFAULT_LAMBDA = 0.4


def _check_shapes(*arrays):
    shapes = {tuple(np.shape(a)) for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(f"loss inputs disagree in shape: {sorted(shapes)}")


def focal_regularization(p_r, p_d, y, *, literal: bool = False, modulator: str = "product",
                         clamp: float = CLAMP) -> nm.Tensor:
    """Focal agreement penalty between two modality probability maps.

    Default (true-class reading): with q_r, q_d the probabilities each map
    assigns to the ground-truth class,

        -(1/M) sum_i a_i (1 - q_r * 2 q_r q_d / (q_r + q_d))^2 log q_r

    with a_i = 0.25 on foreground and 0.75 on background. ``literal=True``
    plugs the raw foreground probabilities in everywhere instead.
    ``modulator="harmonic"`` drops the leading q_r in the modulating factor.
    Inputs may carry leading batch axes; the mean runs over every pixel.
    """
    _check_shapes(p_r, p_d, y)
    if modulator not in ("product", "harmonic"):
        raise ConfigError(f"unknown modulator {modulator!r}")
    y = np.asarray(y, dtype=np.float64)
    pr = nm.clip(p_r, clamp, 1.0 - clamp)
    pd = nm.clip(p_d, clamp, 1.0 - clamp)
    if literal:
        q, qd = pr, pd
    else:
        q = pr * y + (1.0 - pr) * (1.0 - y)
        qd = pd * y + (1.0 - pd) * (1.0 - y)
    harmonic = q * qd * 2.0 / (q + qd)
    m = 1.0 - (q * harmonic if modulator == "product" else harmonic)
    alpha = np.where(y > 0.5, ALPHA_FOREGROUND, ALPHA_BACKGROUND)
    return -nm.mean(m * m * nm.log(q) * alpha)


def position_weight(y, window: int = DEFAULT_WINDOW) -> np.ndarray:
    """w = 1 + 5 |AP(y) - y|; AP is a k x k mean over the in-bounds part of the
    window. Leading axes are treated as batch."""
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"pooling window must be a positive odd integer, got {window}")
    y = np.asarray(y, dtype=np.float64)
    size = (1,) * (y.ndim - 2) + (window, window)
    total = uniform_filter(y, size=size, mode="constant", cval=0.0)
    count = uniform_filter(np.ones_like(y), size=size, mode="constant", cval=0.0)
    return 1.0 + 5.0 * np.abs(total / count - y)


def pixel_position_aware_loss(p, y, *, window: int = DEFAULT_WINDOW,
                              clamp: float = CLAMP) -> nm.Tensor:
    """Half the sum of position-weighted BCE and weighted IoU loss; averaged
    over any leading batch axes."""
    _check_shapes(p, y)
    y = np.asarray(y, dtype=np.float64)
    p = nm.as_tensor(p)
    w = position_weight(y, window)
    axes = (-2, -1)
    pc = nm.clip(p, clamp, 1.0 - clamp)
    bce = -(nm.log(pc) * y + nm.log(1.0 - pc) * (1.0 - y))
    wbce = nm.sum(bce * w, axis=axes) / w.sum(axis=axes)
    inter = nm.sum(p * (y * w), axis=axes)
    union = nm.sum((p + y - p * y) * w, axis=axes)
    wiou = 1.0 - (inter + 1.0) / (union + 1.0)
    return nm.mean((wbce + wiou) * 0.5)


@dataclasses.dataclass
class LossBreakdown:
    l_p: object
    focal: dict          # level -> (rd, dr)
    focal_sum: object
    total: object
    lam: float

    def as_floats(self) -> dict:
        f = lambda v: float(np.asarray(v).reshape(-1)[0])  # noqa: E731
        return {"l_p": f(self.l_p), "focal_sum": f(self.focal_sum),
                "total": f(self.total), "lambda": self.lam}


def total_loss(decoder_losses, level_losses: dict, focal_terms: dict,
               lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    """L_P = mean_i L_P^i + sum_l L_P^l / 2^(l-1);
    total = (1 - lam) L_P + lam * sum_l (L_R^l[rd] + L_R^l[dr]).

    Works on floats or tensors.
    """
    if not decoder_losses:
        raise UsageError("total_loss needs at least one sub-decoder loss")
    if not 0.0 <= lam <= 0.9:
        raise ConfigError(f"lambda must lie in [0, 0.9], got {lam}")
    for level in list(level_losses) + list(focal_terms):
        if level not in (2, 3, 4, 5):
            raise UsageError(f"level index must be in 2..5, got {level}")
    dec = decoder_losses[0]
    for v in decoder_losses[1:]:
        dec = dec + v
    l_p = dec * (1.0 / len(decoder_losses))
    for level in sorted(level_losses):
        l_p = l_p + level_losses[level] * (1.0 / 2 ** (level - 1))
    focal_sum = 0.0
    for level in sorted(focal_terms):
        rd, dr = focal_terms[level]
        focal_sum = focal_sum + rd + dr
    total = l_p * (1.0 - lam) + focal_sum * lam
    return LossBreakdown(l_p=l_p, focal=dict(focal_terms), focal_sum=focal_sum, total=total, lam=lam)
