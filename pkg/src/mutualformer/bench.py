"""Wall-clock comparison of the similarity steps of cross-attention and
cross-diffusion attention.

Only the n x n similarity computation is timed: softmax(Q K^T) for CA and
eps * N(S_r) N(S_d)^T + (1 - eps) (S_r + S_d) / 2 for CDA. The shared S V
product is excluded.
"""
from __future__ import annotations

import io
import time

import numpy as np

from . import numeric as nm

EPSILON = 0.6
COLUMNS = ("kind", "n", "d", "reps", "ca_median_ns", "cda_median_ns", "cda_faster")


def ca_similarity(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    return nm.softmax_rows(nm.matmul(q, nm.transpose(k))).data


def cda_similarity(s_r: np.ndarray, s_d: np.ndarray, eps: float = EPSILON) -> np.ndarray:
    hat_r, hat_d = nm.sym_normalize(s_r), nm.sym_normalize(s_d)
    diffusion = nm.matmul(hat_r, nm.transpose(hat_d))
    return (diffusion * eps + (nm.Tensor(s_r) + s_d) * (0.5 * (1.0 - eps))).data


def _median_ns(fn, reps: int) -> float:
    fn()   # warm-up (kernel compilation, caches)
    times = []
    for _ in range(reps):
        t0 = time.perf_counter_ns()
        fn()
        times.append(time.perf_counter_ns() - t0)
    return float(np.median(times))


def measure(n: int, d: int, reps: int, seed: int = 0) -> dict:
    rng = np.random.default_rng([seed, n, d])
    q, k = rng.standard_normal((n, d)) / np.sqrt(d), rng.standard_normal((n, d))
    s_r = ca_similarity(rng.standard_normal((n, d)) / np.sqrt(d), rng.standard_normal((n, d)))
    s_d = ca_similarity(rng.standard_normal((n, d)) / np.sqrt(d), rng.standard_normal((n, d)))
    ca = _median_ns(lambda: ca_similarity(q, k), reps)
    cda = _median_ns(lambda: cda_similarity(s_r, s_d), reps)
    return {"n": n, "d": d, "reps": reps, "ca_median_ns": ca, "cda_median_ns": cda,
            "cda_faster": cda < ca}


def sweep_sizes(d: int, limit: int = 1024) -> list[int]:
    sizes, n = [], 8
    while n <= min(2 * d, limit):
        sizes.append(n)
        n *= 2
    return sizes


def crossover(sweep_rows: list[dict]) -> int | None:
    """Smallest swept n from which CDA is slower at every larger swept n.

    Tiny n can also favour CA because CDA's fixed per-call overhead is larger;
    that regime is reported in the rows but is not the asymptotic crossover.
    """
    found = None
    for row in sorted(sweep_rows, key=lambda r: r["n"], reverse=True):
        if row["cda_faster"]:
            break
        found = row["n"]
    return found


def run(n: int = 64, d: int = 1024, reps: int = 100, seed: int = 0,
        sweep: bool = True, sweep_reps: int = 5) -> tuple[list[dict], int | None]:
    """Target measurement plus an n-sweep at fixed d. Returns (rows, crossover)."""
    rows = [{"kind": "target", **measure(n, d, reps, seed)}]
    swept = [{"kind": "sweep", **measure(m, d, sweep_reps, seed)} for m in sweep_sizes(d)] if sweep else []
    return rows + swept, crossover(swept) if sweep else None


def to_csv(rows: list[dict], crossover: int | None, d: int) -> str:
    buf = io.StringIO()
    buf.write(",".join(COLUMNS) + "\n")
    for r in rows:
        buf.write(f"{r['kind']},{r['n']},{r['d']},{r['reps']},{r['ca_median_ns']:.0f},"
                  f"{r['cda_median_ns']:.0f},{int(r['cda_faster'])}\n")
    buf.write(f"crossover,{crossover if crossover is not None else 'none'},{d},,,,\n")
    return buf.getvalue()
