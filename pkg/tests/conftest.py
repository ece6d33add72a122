import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

CRITERIA = {
    1: "cross-diffusion correctness suite",
    2: "gradient suite",
    3: "CA vs CDA similarity timing",
    4: "metric oracle suite",
    5: "fusion-strategy ablation",
    6: "layer-count harness",
    7: "loss identities",
    8: "determinism and persistence",
}
_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """criterion(number, ok, detail) records one acceptance line."""
    def record(number: int, ok: bool, detail: str = ""):
        _RESULTS.setdefault(number, []).append((bool(ok), detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number, title in CRITERIA.items():
        checks = _RESULTS.get(number)
        if not checks:
            tr.write_line(f"criterion {number} ({title}): NOT RUN")
            continue
        ok = all(c for c, _ in checks)
        detail = "; ".join(d for _, d in checks if d)
        tr.write_line(f"criterion {number} ({title}): {'PASS' if ok else 'FAIL'}  {detail}")
