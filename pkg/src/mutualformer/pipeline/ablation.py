"""Fusion-strategy and layer-count sweeps.

Every run shares the same :class:`TrainConfig` except for the swept field, so
only the fusion module (or its depth) differs between rows.
"""
from __future__ import annotations

import io
import os

import numpy as np

from .model import FusionStrategy
from .train import TrainConfig, timed_run

RUN_COLUMNS = ("strategy", "seed", "layers", "test_mae", "s_measure", "f_max", "e_max",
               "first_loss", "final_loss", "train_seconds")
SUMMARY_COLUMNS = ("strategy", "layers", "runs", "mean_test_mae", "std_test_mae", "mean_s_measure",
                   "mean_f_max", "mean_e_max", "max_train_seconds")
STRATEGIES = tuple(s.value for s in FusionStrategy)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


def runs_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(RUN_COLUMNS) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(r[c]) for c in RUN_COLUMNS) + "\n")
    return buf.getvalue()


def summarize(rows: list[dict], key: str = "strategy") -> list[dict]:
    """One row per distinct ``key`` value, in first-seen order."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(r[key], []).append(r)
    out = []
    for g in groups.values():
        mae = np.array([r["test_mae"] for r in g])
        out.append({"strategy": g[0]["strategy"], "layers": g[0]["layers"], "runs": len(g),
                    "mean_test_mae": float(mae.mean()), "std_test_mae": float(mae.std()),
                    "mean_s_measure": float(np.mean([r["s_measure"] for r in g])),
                    "mean_f_max": float(np.mean([r["f_max"] for r in g])),
                    "mean_e_max": float(np.mean([r["e_max"] for r in g])),
                    "max_train_seconds": float(max(r["train_seconds"] for r in g))})
    return out


def summary_csv(summary: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(",".join(SUMMARY_COLUMNS) + "\n")
    for r in summary:
        buf.write(",".join(_fmt(r[c]) for c in SUMMARY_COLUMNS) + "\n")
    return buf.getvalue()


def _save(out_dir, name, text):
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, name), "w", newline="") as fh:
            fh.write(text)


def strategy_sweep(base: TrainConfig, strategies=STRATEGIES, seeds=(0, 1, 2), *,
                   out_dir=None, progress=None) -> tuple[list[dict], list[dict]]:
    """Train every (strategy, seed) pair; returns (runs, per-strategy summary)
    and writes ablation_runs.csv / ablation_summary.csv when ``out_dir`` is set."""
    rows = []
    for strategy in strategies:
        for seed in seeds:
            row = timed_run(base.replace(strategy=strategy, seed=seed))
            rows.append(row)
            if progress is not None:
                progress(row)
            _save(out_dir, "ablation_runs.csv", runs_csv(rows))
    summary = summarize(rows)
    _save(out_dir, "ablation_summary.csv", summary_csv(summary))
    return rows, summary


def layer_sweep(base: TrainConfig, layers=(1, 2, 3), seeds=(0,), *, out_dir=None,
                progress=None) -> dict:
    """MutualFormer runs at each depth T; writes layers_T{t}.csv per depth.
    Returns {T: rows}."""
    out = {}
    for t in layers:
        rows = []
        for seed in seeds:
            row = timed_run(base.replace(strategy="mutualformer", layers=t, seed=seed))
            rows.append(row)
            if progress is not None:
                progress(row)
        out[t] = rows
        _save(out_dir, f"layers_T{t}.csv", runs_csv(rows))
    return out
