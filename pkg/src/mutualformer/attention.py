"""Token mixers: self-attention, feature-space cross-attention and
cross-diffusion attention, plus the per-modality combine step.

All functions work on a single token set (n, d) or a batch (..., n, d).
"""
from __future__ import annotations

import dataclasses

import numpy as np

from . import numeric as nm
from .errors import ConfigError, ShapeError
from .numeric import Tensor
from .params import TwoLayerMap, uniform_init


@dataclasses.dataclass
class AttentionParams:
    """Per-modality projections. ``w_q``, ``w_k``, ``w_v`` are (d, heads * d_h);
    ``w_o`` is the optional (heads * d_h, d) output projection."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None = None
    heads: int = 1

    def __post_init__(self):
        inner = self.w_q.shape[1]
        if self.w_k.shape != self.w_q.shape or self.w_v.shape[1] != inner:
            raise ShapeError(
                f"attention projections disagree: {self.w_q.shape}, {self.w_k.shape}, {self.w_v.shape}")
        if inner % self.heads:
            raise ShapeError(f"{inner} projection columns do not split into {self.heads} heads")

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d: int, heads: int, output: bool = True):
        w = [nm.parameter(uniform_init(rng, d, (d, d))) for _ in range(3)]
        w_o = nm.parameter(uniform_init(rng, d, (d, d))) if output else None
        return cls(*w, w_o=w_o, heads=heads)


@dataclasses.dataclass
class CdaConfig:
    """Cross-diffusion settings.

    ``s0_rd`` / ``s0_dr`` default to the identity, ``affinity`` to (S_r + S_d) / 2.
    Supplied matrices are plain arrays (never trained). ``diagnostic`` admits the
    boundary values epsilon = 0 and epsilon = 1.
    """

    epsilon: float = 0.6
    s0_rd: np.ndarray | None = None
    s0_dr: np.ndarray | None = None
    affinity: np.ndarray | None = None
    diagnostic: bool = False

    def __post_init__(self):
        e = float(self.epsilon)
        if self.diagnostic:
            if not 0.0 <= e <= 1.0:
                raise ConfigError(f"epsilon must lie in [0, 1], got {e}")
        elif not 0.0 < e < 1.0:
            raise ConfigError(f"epsilon must lie strictly inside (0, 1), got {e}; "
                              "use diagnostic=True for the endpoints")


@dataclasses.dataclass
class AttentionOutput:
    similarity: Tensor              # (..., n, n), head-averaged for multi-head SA/CA
    mixed: Tensor                   # (..., n, width)
    head_similarities: Tensor | None = None
    values: Tensor | None = None    # V with heads concatenated, (..., n, heads * d_h)
    diffusion: Tensor | None = None  # CDA only: the epsilon-weighted diffusion term before weighting


def _tokens(x) -> Tensor:
    tokens = getattr(x, "tokens", None)
    return tokens if tokens is not None else nm.as_tensor(x)


def _split_heads(y: Tensor, heads: int) -> Tensor:
    lead, n, c = y.shape[:-2], y.shape[-2], y.shape[-1]
    y = nm.reshape(y, lead + (n, heads, c // heads))
    k = len(lead)
    return nm.permute(y, tuple(range(k)) + (k + 1, k, k + 2))


def _merge_heads(y: Tensor) -> Tensor:
    k = y.ndim - 3
    lead = y.shape[:k]
    heads, n, dh = y.shape[k:]
    y = nm.permute(y, tuple(range(k)) + (k + 1, k, k + 2))
    return nm.reshape(y, lead + (n, heads * dh))


def _check_width(x: Tensor, p: AttentionParams, who: str):
    if x.ndim < 2 or x.shape[-1] != p.width:
        raise ShapeError(f"{who}: tokens {x.shape} do not match projection width {p.width}")


def _attend(xq: Tensor, xkv: Tensor, pq: AttentionParams, pkv: AttentionParams) -> AttentionOutput:
    h = pq.heads
    q = _split_heads(nm.matmul(xq, pq.w_q), h)
    k = _split_heads(nm.matmul(xkv, pkv.w_k), h)
    v_cat = nm.matmul(xkv, pkv.w_v)
    v = _split_heads(v_cat, h)
    s = nm.softmax_rows(nm.matmul(q, nm.transpose(k)))
    mixed = _merge_heads(nm.matmul(s, v))
    if pq.w_o is not None:
        mixed = nm.matmul(mixed, pq.w_o)
    return AttentionOutput(similarity=nm.mean(s, axis=-3), mixed=mixed,
                           head_similarities=s, values=v_cat)


def self_attention(x, p: AttentionParams) -> AttentionOutput:
    """softmax(Q K^T) V per head, heads concatenated then projected by ``w_o``."""
    x = _tokens(x)
    _check_width(x, p, "self_attention")
    return _attend(x, x, p, p)


def cross_attention(xr, xd, pr: AttentionParams, pd: AttentionParams):
    """Feature-space cross-attention. Returns (rd, dr) where rd queries with the
    r tokens and reads keys/values of the d tokens."""
    xr, xd = _tokens(xr), _tokens(xd)
    _check_width(xr, pr, "cross_attention")
    _check_width(xd, pd, "cross_attention")
    if xr.shape != xd.shape:
        raise ShapeError(f"cross_attention: token sets differ, {xr.shape} vs {xd.shape}")
    if pr.heads != pd.heads:
        raise ShapeError("cross_attention: modalities use different head counts")
    return _attend(xr, xd, pr, pd), _attend(xd, xr, pd, pr)


def cross_diffusion_attention(s_r, s_d, v_r, v_d, cfg: CdaConfig | None = None):
    """One-step cross diffusion over the two modalities' own similarity matrices.

        S_rd = eps * N(S_r) S0_rd N(S_d)^T + (1 - eps) * A,   M_rd = S_rd V_d
        S_dr = eps * N(S_d) S0_dr N(S_r)^T + (1 - eps) * A,   M_dr = S_dr V_r

    with N the symmetric normalisation and A = (S_r + S_d) / 2 unless supplied.
    No softmax or renormalisation is applied to the blended matrices.
    """
    cfg = cfg or CdaConfig()
    s_r, s_d = nm.as_tensor(s_r), nm.as_tensor(s_d)
    v_r, v_d = nm.as_tensor(v_r), nm.as_tensor(v_d)
    if s_r.shape != s_d.shape:
        raise ShapeError(f"cross_diffusion_attention: similarity shapes {s_r.shape} vs {s_d.shape}")
    n = s_r.shape[-1]
    if v_r.shape[-2] != n or v_d.shape[-2] != n:
        raise ShapeError(f"cross_diffusion_attention: values {v_r.shape}, {v_d.shape} "
                         f"do not have {n} rows")
    hat_r = nm.sym_normalize(s_r)
    hat_d = nm.sym_normalize(s_d)
    left_rd = hat_r if cfg.s0_rd is None else nm.matmul(hat_r, cfg.s0_rd)
    left_dr = hat_d if cfg.s0_dr is None else nm.matmul(hat_d, cfg.s0_dr)
    diff_rd = nm.matmul(left_rd, nm.transpose(hat_d))
    diff_dr = nm.matmul(left_dr, nm.transpose(hat_r))
    if cfg.affinity is None:
        a = (s_r + s_d) * 0.5
    else:
        a = nm.as_tensor(cfg.affinity)
        if a.shape[-2:] != (n, n):
            raise ShapeError(f"affinity {a.shape} is not {n}x{n}")
    eps = float(cfg.epsilon)
    s_rd = diff_rd * eps + a * (1.0 - eps)
    s_dr = diff_dr * eps + a * (1.0 - eps)
    rd = AttentionOutput(similarity=s_rd, mixed=nm.matmul(s_rd, v_d), diffusion=diff_rd)
    dr = AttentionOutput(similarity=s_dr, mixed=nm.matmul(s_dr, v_r), diffusion=diff_dr)
    return rd, dr


def combine_modality(m_self, m_cross, f: TwoLayerMap) -> Tensor:
    """H = f(M_self || M_cross)."""
    m_self, m_cross = nm.as_tensor(m_self), nm.as_tensor(m_cross)
    if m_self.shape[:-1] != m_cross.shape[:-1]:
        raise ShapeError(f"combine_modality: row shapes {m_self.shape} vs {m_cross.shape}")
    return f(nm.concat_cols(m_self, m_cross))
