from pathlib import Path

import numpy as np
import pytest

from symprune.pruner import LayerStats

DATA = Path(__file__).parent / "data"


def load_lines(name):
    return [ln for ln in (DATA / name).read_text().splitlines() if ln.strip()]


def make_layer(W, G=None, Xcal=None, name="t"):
    W = np.asarray(W, dtype=np.float32)
    if G is None:
        G = np.zeros_like(W)
    if Xcal is None:
        Xcal = np.ones((1, W.shape[1]), dtype=np.float32)
    return LayerStats(name, W, np.asarray(G, dtype=np.float32), np.asarray(Xcal, dtype=np.float32))


def random_layer(rng, rows=6, cols=8, n=16, low=None, high=None):
    if low is None:
        W, G = rng.standard_normal((2, rows, cols))
    else:
        W, G = rng.uniform(low, high, (2, rows, cols))
    return make_layer(W, G, rng.standard_normal((n, cols)))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus():
    return load_lines("searched_metrics.txt")


# one line per acceptance criterion, echoed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
