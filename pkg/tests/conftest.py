import numpy as np
import pytest

from dpie.data import Dataset
from dpie.tuning import CVPlan


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def quick_plan():
    """A small CV grid for unit tests."""
    return CVPlan(folds=3, sc_grid=(0.1, 1.0, 10.0), n_lambda=8)


def toy_dataset(rng, n=120, m=80, d=2, tau=1.0, shift=0.0):
    """Experiment plus external controls with a linear outcome and a constant shift."""
    X = rng.uniform(-1, 1, size=(n + m, d))
    S = np.r_[np.ones(n), np.zeros(m)]
    A = np.r_[rng.integers(0, 2, n), np.zeros(m)].astype(float)
    Y = X @ np.linspace(1, -1, d) + tau * A + shift * (1 - S) + rng.standard_normal(n + m)
    return Dataset(X, A, Y, S)


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")
    return path


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion."""
    log = request.config.stash[_ACCEPTANCE]

    def record(label, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        log.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
