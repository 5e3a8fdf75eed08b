import numpy as np
import pytest

from ghofl.datamodel import LabeledEmbeddingSet


def random_set(n=200, d=6, C=4, seed=0, spread=3.0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % C
    rng.shuffle(y)
    mu = spread * rng.standard_normal((C, d))
    X = mu[y] + rng.standard_normal((n, d))
    return LabeledEmbeddingSet(X, y, C)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


@pytest.fixture
def small_set():
    return random_set()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.section("acceptance criteria")
    for n, title in mod.TITLES.items():
        if n in mod.RESULTS:
            ok, detail = mod.RESULTS[n]
            terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} FAIL  {title}: not reached (error before verdict)")
