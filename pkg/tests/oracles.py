"""Straight-line reference implementations used as test oracles.

Written independently of the library code: explicit loops, no vectorisation,
no shared helpers.
"""
import math

import numpy as np

EPS = 2.220446049250313e-16


# ---------------------------------------------------------------- matrices

def matmul_loops(a, b):
    n, k = a.shape
    m = b.shape[1]
    out = np.zeros((n, m))
    for i in range(n):
        for p in range(k):
            for j in range(m):
                out[i, j] += a[i, p] * b[p, j]
    return out


def sym_normalize_loops(s):
    n = s.shape[0]
    r = [sum(s[i, j] for j in range(n)) for i in range(n)]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = s[i, j] / math.sqrt(r[i] * r[j])
    return out


def cda_loops(s_r, s_d, eps, s0_rd=None, s0_dr=None, affinity=None):
    """S_rd, S_dr by explicit summation."""
    n = s_r.shape[0]
    hr, hd = sym_normalize_loops(s_r), sym_normalize_loops(s_d)
    s0_rd = np.eye(n) if s0_rd is None else s0_rd
    s0_dr = np.eye(n) if s0_dr is None else s0_dr
    a = (s_r + s_d) / 2 if affinity is None else affinity
    s_rd, s_dr = np.zeros((n, n)), np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            t_rd = t_dr = 0.0
            for k in range(n):
                for m in range(n):
                    t_rd += hr[i, k] * s0_rd[k, m] * hd[j, m]
                    t_dr += hd[i, k] * s0_dr[k, m] * hr[j, m]
            s_rd[i, j] = eps * t_rd + (1 - eps) * a[i, j]
            s_dr[i, j] = eps * t_dr + (1 - eps) * a[i, j]
    return s_rd, s_dr


# ---------------------------------------------------------------- counting metrics

def pr_counts(pred, gt, t):
    tp = fp = fn = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        hit = p >= t
        if hit and g:
            tp += 1
        elif hit:
            fp += 1
        elif g:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 1.0
    recall = tp / (tp + fn) if tp + fp else 0.0
    return precision, recall


def f_beta(p, r, b2=0.3):
    den = b2 * p + r
    return (1 + b2) * p * r / den if den > 0 else 0.0


# ---------------------------------------------------------------- S-measure

def _mean(xs):
    return sum(xs) / len(xs)


def _std1(xs):
    if len(xs) < 2:
        return 0.0
    mu = _mean(xs)
    return math.sqrt(sum((x - mu) ** 2 for x in xs) / (len(xs) - 1))


def _obj(xs):
    mu = _mean(xs)
    return 2 * mu / (mu * mu + 1 + _std1(xs) + EPS)


def _round_away(x):
    return math.floor(x + 0.5) if x >= 0 else -math.floor(-x + 0.5)


def _ssim_loops(p, g):
    vals_p = [v for row in p for v in row]
    vals_g = [v for row in g for v in row]
    n = len(vals_p)
    if n == 0:
        return 0.0
    x, y = _mean(vals_p), _mean(vals_g)
    dof = max(n - 1, 1)
    sx = sum((a - x) ** 2 for a in vals_p) / dof
    sy = sum((b - y) ** 2 for b in vals_g) / dof
    sxy = sum((a - x) * (b - y) for a, b in zip(vals_p, vals_g)) / dof
    alpha = 4 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0:
        return alpha / (beta + EPS)
    return 1.0 if beta == 0 else 0.0


def s_measure_loops(pred, gt, alpha=0.5):
    h, w = gt.shape
    fg = [(i, j) for i in range(h) for j in range(w) if gt[i, j]]
    m = len(fg) / (h * w)
    if m == 0:
        return 1 - _mean([pred[i, j] for i in range(h) for j in range(w)])
    if m == 1:
        return _mean([pred[i, j] for i in range(h) for j in range(w)])
    bg = [(i, j) for i in range(h) for j in range(w) if not gt[i, j]]
    obj = m * _obj([pred[i, j] for i, j in fg]) + (1 - m) * _obj([1 - pred[i, j] for i, j in bg])
    cx = _round_away(sum(j for _, j in fg) / len(fg)) + 1
    cy = _round_away(sum(i for i, _ in fg) / len(fg)) + 1
    region = 0.0
    for r0, r1 in ((0, cy), (cy, h)):
        for c0, c1 in ((0, cx), (cx, w)):
            p = [[pred[i, j] for j in range(c0, c1)] for i in range(r0, r1)]
            g = [[float(gt[i, j]) for j in range(c0, c1)] for i in range(r0, r1)]
            area = max(r1 - r0, 0) * max(c1 - c0, 0)
            region += area / (h * w) * _ssim_loops(p, g)
    return max(0.0, alpha * obj + (1 - alpha) * region)


# ---------------------------------------------------------------- E-measure

def e_single_loops(b, g):
    h, w = g.shape
    n = h * w
    gsum = sum(int(g[i, j]) for i in range(h) for j in range(w))
    bsum = sum(int(b[i, j]) for i in range(h) for j in range(w))
    if gsum == 0:
        return (n - bsum) / n
    if gsum == n:
        return bsum / n
    mb, mg = bsum / n, gsum / n
    total = 0.0
    for i in range(h):
        for j in range(w):
            pb, pg = b[i, j] - mb, g[i, j] - mg
            xi = 2 * pb * pg / (pb * pb + pg * pg)
            total += (1 + xi) ** 2 / 4
    return total / n


def e_max_loops(pred, gt):
    seen = {}   # identical binarisations share one evaluation
    for k in range(256):
        b = (pred >= k / 255).astype(int)
        key = b.tobytes()
        if key not in seen:
            seen[key] = e_single_loops(b, gt.astype(int))
    return max(seen.values())


# ---------------------------------------------------------------- attention and block, plain numpy

def softmax_np(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gelu_np(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def ln_np(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def attention_np(xq, xkv, wq, wk, wv, wo, heads):
    """Per-head loop; returns (head-averaged S, output, concatenated V)."""
    dh = wq.shape[1] // heads
    q, k, v = xq @ wq, xkv @ wk, xkv @ wv
    outs, sims = [], []
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        s = softmax_np(q[:, cols] @ k[:, cols].T)
        sims.append(s)
        outs.append(s @ v[:, cols])
    m = np.concatenate(outs, axis=1)
    if wo is not None:
        m = m @ wo
    return sum(sims) / heads, m, v


def two_layer_np(x, w1, b1, w2, b2):
    return gelu_np(x @ w1 + b1) @ w2 + b2


def block_np(xr, xd, P, heads, eps):
    """Monolithic block: SA -> CDA -> combine -> coarse branch -> aggregation.
    ``P`` is a flat dict of plain arrays."""
    s_r, m_r, v_r = attention_np(xr, xr, P["rq"], P["rk"], P["rv"], P["ro"], heads)
    s_d, m_d, v_d = attention_np(xd, xd, P["dq"], P["dk"], P["dv"], P["do"], heads)
    dr_ = s_r.sum(axis=1)
    dd_ = s_d.sum(axis=1)
    hat_r = s_r / np.sqrt(np.outer(dr_, dr_))
    hat_d = s_d / np.sqrt(np.outer(dd_, dd_))
    a = (s_r + s_d) / 2
    s_rd = eps * hat_r @ hat_d.T + (1 - eps) * a
    s_dr = eps * hat_d @ hat_r.T + (1 - eps) * a
    m_rd, m_dr = s_rd @ v_d, s_dr @ v_r
    h_r = two_layer_np(np.concatenate([m_r, m_rd], 1), *P["fr"])
    h_d = two_layer_np(np.concatenate([m_d, m_dr], 1), *P["fd"])
    xcat = np.concatenate([xr, xd], 1)
    u = xcat @ P["cin"][0] + P["cin"][1]
    _, att, _ = attention_np(ln_np(u, *P["cln1"]), ln_np(u, *P["cln1"]),
                             P["cq"], P["ck"], P["cv"], P["co"], heads)
    z = u + att
    h = z + two_layer_np(ln_np(z, *P["cln2"]), *P["cffn"])
    fused = np.concatenate([h_r, h_d, h], 1) @ P["g"][0] + P["g"][1]
    return two_layer_np(ln_np(fused, *P["ln"]), *P["ffn"]) + xcat @ P["h"][0] + P["h"][1]
