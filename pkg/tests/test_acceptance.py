"""Acceptance criteria, one test per criterion. Each records a PASS/FAIL line
that the terminal summary prints at the end of the run."""
import json
import time

import numpy as np
import pytest

from mutualformer import bench
from mutualformer import metrics as m
from mutualformer import numeric as nm
from mutualformer.attention import CdaConfig, cross_diffusion_attention
from mutualformer.cli import main
from mutualformer.gradcheck import TOLERANCE, op_suite
from mutualformer.objectives import focal_regularization, total_loss
from mutualformer.pipeline import ablation
from mutualformer.pipeline import checkpoint as ckpt
from mutualformer.pipeline.train import (TrainConfig, eval_csv, evaluate, held_out_split, load_model,
                                         train)
from oracles import cda_loops, e_max_loops, s_measure_loops

SEEDS = (0, 1, 2)


def _row_stochastic(rng, n):
    z = rng.standard_normal((n, n)) * rng.uniform(0.2, 3.0)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_criterion_1_cda_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    oracle_err = affine_err = dual_err = 0.0
    in_range = True
    for i in range(200):
        n = int(rng.integers(2, 17))
        s_r, s_d = _row_stochastic(rng, n), _row_stochastic(rng, n)
        eps = float(rng.uniform(0.05, 0.95))
        rd, dr = cross_diffusion_attention(s_r, s_d, s_r, s_d, CdaConfig(eps))
        o_rd, o_dr = cda_loops(s_r, s_d, eps)
        oracle_err = max(oracle_err, np.abs(rd.similarity.data - o_rd).max(),
                         np.abs(dr.similarity.data - o_dr).max())
        by_eps = {e: cross_diffusion_attention(s_r, s_d, s_r, s_d, CdaConfig(e, diagnostic=True))[0]
                  .similarity.data for e in (0.0, 0.5, 1.0)}
        affine_err = max(affine_err, np.abs(by_eps[0.5] - (by_eps[0.0] + by_eps[1.0]) / 2).max())
        dual_err = max(dual_err, np.abs(rd.diffusion.data.T - dr.diffusion.data).max())
        for s in (rd.similarity.data, dr.similarity.data):
            in_range &= bool(s.min() >= 0.0 and s.max() <= 1.0)
    seconds = time.perf_counter() - t0
    ok = oracle_err <= 1e-12 and affine_err <= 1e-12 and dual_err <= 1e-15 and in_range and seconds < 10
    criterion(1, ok, f"oracle {oracle_err:.1e}, eps-affine {affine_err:.1e}, "
                     f"transpose {dual_err:.1e}, range {'ok' if in_range else 'violated'}, {seconds:.1f} s")
    assert ok


def test_criterion_2_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst, where = 0.0, ""
    for seed in range(20):
        for name, err in op_suite(seed).items():
            if err > worst:
                worst, where = err, f"{name} seed {seed}"
    seconds = time.perf_counter() - t0
    ok = worst < TOLERANCE and seconds < 120
    criterion(2, ok, f"max rel error {worst:.2e} ({where}) over 20 seeds, {seconds:.0f} s")
    assert ok


def test_criterion_3_similarity_timing(criterion, tmp_path):
    t0 = time.perf_counter()
    assert main(["bench", "--n", "64", "--d", "1024", "--reps", "100", "--out", str(tmp_path)]) == 0
    seconds = time.perf_counter() - t0
    rows = (tmp_path / "bench.csv").read_text().splitlines()
    target = dict(zip(rows[0].split(","), rows[1].split(",")))
    crossover = rows[-1].split(",")[1]
    ca, cda = float(target["ca_median_ns"]), float(target["cda_median_ns"])
    ok = cda < ca and int(target["reps"]) >= 100 and rows[-1].startswith("crossover,") and seconds < 60
    criterion(3, ok, f"n=64 d=1024: CA {ca / 1e3:.0f} us, CDA {cda / 1e3:.0f} us, "
                     f"crossover n = {crossover}, {seconds:.0f} s")
    assert ok


def _bits(codes):
    return ((codes[:, None] >> np.arange(9)) & 1).astype(float)


def test_criterion_4_metric_oracles(criterion):
    codes = np.arange(512)
    preds = _bits(codes)
    gt_codes = codes[1:]
    gts = _bits(gt_codes)
    pop = np.array([bin(c).count("1") for c in range(512)])
    pr_err = f_err = mae_err = 0.0
    for pc in codes:
        p_hat, r_hat = m.pr_curves(np.broadcast_to(preds[pc], gts.shape).reshape(-1, 3, 3),
                                   gts.reshape(-1, 3, 3))
        f_hat = m.f_curve((p_hat, r_hat)).max(axis=1)
        tp = pop[pc & gt_codes]
        fp = pop[pc & ~gt_codes & 511]
        fn = pop[~pc & gt_codes & 511]
        # threshold 0 marks every pixel; any positive threshold marks exactly the ones
        all_p, all_r = pop[gt_codes] / 9, np.ones(len(gt_codes))
        ones_p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 1.0)
        ones_r = np.where(tp + fp > 0, tp / (tp + fn), 0.0)
        pr_err = max(pr_err, np.abs(p_hat[:, 0] - all_p).max(), np.abs(r_hat[:, 0] - all_r).max(),
                     np.abs(p_hat[:, 1:] - ones_p[:, None]).max(),
                     np.abs(r_hat[:, 1:] - ones_r[:, None]).max())
        f = lambda p, r: np.where(0.3 * p + r > 0, 1.3 * p * r / np.maximum(0.3 * p + r, 1e-300), 0.0)
        f_err = max(f_err, np.abs(f_hat - np.maximum(f(all_p, all_r), f(ones_p, ones_r))).max())
        if pc % 8 == 0:
            got = np.array([m.mae(preds[pc].reshape(3, 3), g.reshape(3, 3)) for g in gts])
            mae_err = max(mae_err, np.abs(got - (fp + fn) / 9).max())

    rng = np.random.default_rng(99)
    s_err = e_err = 0.0
    for i in range(100):
        g = np.zeros((32, 32))
        r0, c0 = rng.integers(0, 24, size=2)
        g[r0:r0 + rng.integers(3, 12), c0:c0 + rng.integers(3, 12)] = 1
        g[rng.uniform(size=g.shape) < 0.03] = 1
        pred = np.clip(g * rng.uniform(0.3, 0.9) + rng.uniform(0, 0.5, size=g.shape), 0, 1)
        s_err = max(s_err, abs(m.s_measure(pred, g) - s_measure_loops(pred, g > 0.5)))
        quant = np.round(pred * 15) * 17 / 255
        e_err = max(e_err, abs(m.e_measure_max(quant, g) - e_max_loops(quant, g)))
    g = np.zeros((32, 32))
    g[8:20, 10:25] = 1
    perfect = m.evaluate_map(g, g)
    perfect_ok = (abs(perfect["s_measure"] - 1) <= 1e-12 and perfect["f_max"] == 1.0
                  and perfect["e_max"] == 1.0 and perfect["mae"] == 0.0)
    ok = max(pr_err, f_err, mae_err) <= 1e-12 and max(s_err, e_err) <= 1e-9 and perfect_ok
    criterion(4, ok, f"3x3 exhaustive P/R {pr_err:.1e} F {f_err:.1e} MAE {mae_err:.1e}; "
                     f"32x32 S {s_err:.1e} E {e_err:.1e}; perfect map "
                     f"S={perfect['s_measure']:.15f} F={perfect['f_max']} E={perfect['e_max']} "
                     f"MAE={perfect['mae']}")
    assert ok


@pytest.fixture(scope="module")
def ablation_runs(tmp_path_factory):
    out = tmp_path_factory.mktemp("ablation")
    runs, summary = ablation.strategy_sweep(TrainConfig(), seeds=SEEDS, out_dir=str(out))
    return runs, {r["strategy"]: r for r in summary}


def test_criterion_5_fusion_ablation(criterion, ablation_runs):
    runs, summary = ablation_runs
    mf, add = summary["mutualformer"]["mean_test_mae"], summary["add"]["mean_test_mae"]
    slowest = max(r["train_seconds"] for r in runs)
    ordering = " ".join(f"{k}={v['mean_test_mae']:.4f}" for k, v in summary.items())
    ok = mf <= add and mf <= 0.10 and slowest <= 600 and len(runs) == 18
    criterion(5, ok, f"mean test MAE {ordering}; MF <= Add {'holds' if mf <= add else 'violated'}; "
                     f"slowest run {slowest:.0f} s")
    assert mf <= 0.10 and slowest <= 600
    assert mf <= add, f"MutualFormer {mf:.4f} > Add {add:.4f}"


def test_loss_decreases_in_toy_runs(ablation_runs):
    runs, _ = ablation_runs
    for r in runs:
        assert r["final_loss"] < 0.5 * r["first_loss"], r


def test_criterion_6_layer_harness(criterion, tmp_path):
    t0 = time.perf_counter()
    result = ablation.layer_sweep(TrainConfig(), layers=(1, 2, 3), out_dir=str(tmp_path))
    headers = {t: (tmp_path / f"layers_T{t}.csv").read_text().splitlines()[0] for t in result}
    ok = set(result) == {1, 2, 3} and len(set(headers.values())) == 1 and \
        all(np.isfinite(rows[0]["test_mae"]) for rows in result.values())
    maes = ", ".join(f"T={t} {rows[0]['test_mae']:.4f}" for t, rows in result.items())
    criterion(6, ok, f"test MAE {maes} (no ordering asserted), {time.perf_counter() - t0:.0f} s")
    assert ok


def test_criterion_7_loss_identities(criterion):
    rng = np.random.default_rng(5)
    exact = True
    for _ in range(50):
        dec = list(rng.uniform(0, 2, size=2))
        lv = {l: float(rng.uniform(0, 2)) for l in (2, 3, 4, 5)}
        focal = {l: tuple(rng.uniform(0, 1, size=2)) for l in (2, 3, 4, 5)}
        b = total_loss(dec, lv, focal, lam=0.0)
        exact &= b.total == b.l_p
    example = total_loss([1.0, 1.0], {l: 1.0 for l in (2, 3, 4, 5)},
                         {l: (1.0, 1.0) for l in (2, 3, 4, 5)}, lam=0.0).l_p
    y = (rng.uniform(size=(2, 8, 8)) > 0.5).astype(float)
    focal_zero = focal_regularization(nm.Tensor(y), nm.Tensor(y), y).item()
    ok = exact and example == 1.9375 and abs(focal_zero) <= 1e-6
    criterion(7, ok, f"lambda=0 exact over 50 draws: {exact}; example {example}; "
                     f"focal on perfect maps {focal_zero:.1e}")
    assert ok


def test_criterion_8_determinism(criterion, tmp_path):
    flags = ["--epochs", "2", "--train-count", "20", "--test-count", "10", "--size", "32",
             "--window", "15", "--d", "32"]
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["train", *flags, "--out", str(out)]) == 0
    manifests = [json.loads((o / "manifest.json").read_text()) for o in outs]
    same_train = manifests[0] == manifests[1]

    cfg, tree = load_model(ckpt.load(outs[0] / "final.mfck"))
    result = train(cfg)
    samples = held_out_split(cfg)
    in_memory = eval_csv(evaluate(result.tree(), cfg, samples))
    evals = []
    for i, o in enumerate(outs):
        e = tmp_path / f"eval{i}"
        assert main(["eval", "--checkpoint", str(o / "final.mfck"), "--out", str(e)]) == 0
        evals.append((e / "metrics.csv").read_text())
    from_ckpt = eval_csv(evaluate(tree, cfg, samples))
    ok = same_train and evals[0] == evals[1] == in_memory == from_ckpt
    criterion(8, ok, f"train artifacts identical: {same_train}; "
                     f"checkpoint eval CSV identical to in-memory: {evals[0] == in_memory == from_ckpt}")
    assert ok
