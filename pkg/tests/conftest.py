import numpy as np
import pytest

from sgp.kernels import KernelSpec


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


def random_theta(rng, Q, lo=0.5, hi=2.0):
    return KernelSpec(rng.uniform(lo, hi), rng.uniform(lo, hi, Q))


def central_diff(f, x, step=1e-5):
    """Central differences of scalar f over every entry of array x."""
    x = np.array(x, dtype=float)
    g = np.empty_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2 * step)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


# verdict lines from test_acceptance.py, repeated at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
