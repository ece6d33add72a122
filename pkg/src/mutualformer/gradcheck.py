"""Central finite-difference checks of tape gradients."""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import numeric as nm
from .numeric import Tensor

STEP = 1e-5
TOLERANCE = 1e-4
# partials below this magnitude are compared absolutely (FD roundoff is ~1e-10)
ERROR_FLOOR = 1e-5


def relative_error(analytic, numeric, floor: float = ERROR_FLOOR) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def check_gradients(loss_fn: Callable[[dict], Tensor], inputs: dict[str, np.ndarray], *,
                    h: float = STEP, max_entries: int | None = None,
                    rng: np.random.Generator | None = None) -> dict[str, float]:
    """Compare tape gradients of ``loss_fn`` against central differences.

    ``loss_fn`` maps ``{name: Tensor}`` to a scalar tensor. When ``max_entries``
    is set, that many randomly chosen entries per input are checked.
    Returns the max relative error per input.
    """
    rng = rng or np.random.default_rng(0)
    params = {k: nm.parameter(v, name=k) for k, v in inputs.items()}
    with nm.Tape() as tape:
        loss = loss_fn(params)
    grads = tape.backward(loss, params)

    report = {}
    for name, base in inputs.items():
        base = np.asarray(base, dtype=np.float64)
        flat = base.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            vals = []
            for sign in (1.0, -1.0):
                pert = flat.copy()
                pert[i] += sign * h
                trial = dict(params)
                trial[name] = nm.Tensor(pert.reshape(base.shape))
                vals.append(loss_fn(trial).item())
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        analytic = grads[name].reshape(-1)[idx]
        report[name] = float(relative_error(analytic, numeric).max()) if len(idx) else 0.0
    return report


def _weighted(out: Tensor, seed: int) -> Tensor:
    """Scalar probe sum(out * W) with W fixed by (seed, shape)."""
    weights = np.random.default_rng([seed, *out.shape]).standard_normal(out.shape)
    return nm.sum(out * weights)


def op_suite(seed: int, *, include_block: bool = True, max_entries: int = 8) -> dict[str, float]:
    """Max relative gradient error for every differentiable operation, the
    attention mixers, the losses and (optionally) a full MutualFormer block."""
    from . import attention as at
    from . import block as bk
    from . import objectives as ob
    from .params import named_tensors, replace_tensors

    rng = np.random.default_rng(seed)
    w = seed + 10_000
    res: dict[str, float] = {}

    def run(name, fn, inputs, entries=None):
        r = check_gradients(fn, inputs, max_entries=entries, rng=rng)
        res[name] = max(r.values())

    def pos(*shape):
        return rng.uniform(0.2, 1.0, size=shape)

    run("matmul", lambda p: _weighted(nm.matmul(p["a"], p["b"]), w),
        {"a": rng.standard_normal((4, 5)), "b": rng.standard_normal((5, 3))})
    run("matmul_batched", lambda p: _weighted(nm.matmul(p["a"], p["b"]), w),
        {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((2, 4, 3))})
    run("softmax_rows", lambda p: _weighted(nm.softmax_rows(p["x"]), w),
        {"x": rng.standard_normal((4, 6)) * 3})
    run("sym_normalize", lambda p: _weighted(nm.sym_normalize(p["s"]), w), {"s": pos(5, 5)})
    run("layer_norm", lambda p: _weighted(nm.layer_norm(p["x"], p["g"], p["b"]), w),
        {"x": rng.standard_normal((3, 6)), "g": rng.standard_normal(6), "b": rng.standard_normal(6)})
    run("gelu", lambda p: _weighted(nm.gelu(p["x"]), w), {"x": rng.standard_normal((4, 5)) * 2})
    run("linear", lambda p: _weighted(nm.linear(p["x"], p["w"], p["b"]), w),
        {"x": rng.standard_normal((4, 5)), "w": rng.standard_normal((5, 3)),
         "b": rng.standard_normal(3)})
    run("concat_cols", lambda p: _weighted(nm.concat_cols(p["a"], p["b"]), w),
        {"a": rng.standard_normal((3, 2)), "b": rng.standard_normal((3, 4))})
    run("sigmoid", lambda p: _weighted(nm.sigmoid(p["x"]), w), {"x": rng.standard_normal((3, 4)) * 2})
    run("log", lambda p: _weighted(nm.log(p["x"]), w), {"x": pos(3, 4)})
    run("exp", lambda p: _weighted(nm.exp(p["x"]), w), {"x": rng.standard_normal((3, 4))})
    relu_in = rng.standard_normal((4, 5))
    relu_in[np.abs(relu_in) < 0.05] = 0.5
    run("relu", lambda p: _weighted(nm.relu(p["x"]), w), {"x": relu_in})
    run("div", lambda p: _weighted(nm.div(p["a"], p["b"]), w),
        {"a": rng.standard_normal((3, 4)), "b": pos(3, 4)})
    run("conv2d", lambda p: _weighted(nm.conv2d(p["x"], p["w"], p["b"], stride=2, padding=1), w),
        {"x": rng.standard_normal((2, 6, 6, 3)), "w": rng.standard_normal((3, 3, 3, 4)),
         "b": rng.standard_normal(4)}, entries=max_entries)
    run("resize_bilinear", lambda p: _weighted(nm.resize_bilinear(p["x"], (7, 8)), w),
        {"x": rng.standard_normal((2, 3, 4, 2))})

    d, n, heads = 8, 5, 2
    ap = {k: rng.standard_normal((d, d)) * 0.5 for k in ("q", "k", "v", "o")}

    def attn(p, pre=""):
        return at.AttentionParams(p[pre + "q"], p[pre + "k"], p[pre + "v"], p[pre + "o"], heads)

    run("self_attention",
        lambda p: _weighted(at.self_attention(p["x"], attn(p)).mixed, w),
        {"x": rng.standard_normal((n, d)), **ap})
    ap_d = {"d" + k: v + 0.1 for k, v in ap.items()}
    run("cross_attention",
        lambda p: _weighted(nm.concat_cols(*(o.mixed for o in at.cross_attention(
            p["xr"], p["xd"], attn(p), attn(p, "d")))), w),
        {"xr": rng.standard_normal((n, d)), "xd": rng.standard_normal((n, d)), **ap, **ap_d})
    cfg = at.CdaConfig(epsilon=0.6)
    run("cross_diffusion_attention",
        lambda p: _weighted(nm.concat_cols(*(o.mixed for o in at.cross_diffusion_attention(
            nm.softmax_rows(p["zr"]), nm.softmax_rows(p["zd"]), p["vr"], p["vd"], cfg))), w),
        {"zr": rng.standard_normal((n, n)), "zd": rng.standard_normal((n, n)),
         "vr": rng.standard_normal((n, 3)), "vd": rng.standard_normal((n, 3))})
    f_tree = at.TwoLayerMap.init(rng, 2 * d, d, d)
    f_vals = {k: np.asarray(v.data) for k, v in named_tensors(f_tree).items()}
    run("combine_modality",
        lambda p: _weighted(at.combine_modality(
            p["ms"], p["mc"], replace_tensors(f_tree, {k: p[k] for k in f_vals})), w),
        {"ms": rng.standard_normal((n, d)), "mc": rng.standard_normal((n, d)), **f_vals})

    y = (rng.uniform(size=(2, 6, 6)) > 0.5).astype(float)
    run("focal_regularization",
        lambda p: ob.focal_regularization(nm.sigmoid(p["zr"]), nm.sigmoid(p["zd"]), y),
        {"zr": rng.standard_normal((2, 6, 6)), "zd": rng.standard_normal((2, 6, 6))})
    run("pixel_position_aware_loss",
        lambda p: ob.pixel_position_aware_loss(nm.sigmoid(p["z"]), y, window=3),
        {"z": rng.standard_normal((2, 6, 6))})

    if include_block:
        bp = bk.BlockParams.init(rng, d, heads, coarse=True, cda=at.CdaConfig(epsilon=0.6))
        vals = {k: np.asarray(v.data) + 0.0 for k, v in named_tensors(bp).items()}
        for k in vals:   # non-trivial LN gains/biases
            if k.endswith("gain") or k.endswith(".b") or k.endswith("bias"):
                vals[k] = vals[k] + rng.standard_normal(vals[k].shape) * 0.3
        xr, xd = rng.standard_normal((n, d)), rng.standard_normal((n, d))

        def block_loss(p):
            tree = replace_tensors(bp, {k: p[k] for k in vals})
            return _weighted(bk.block_forward(p["xr"], p["xd"], tree).p, w)

        run("mutualformer_block", block_loss, {"xr": xr, "xd": xd, **vals}, entries=max_entries)
    return res
