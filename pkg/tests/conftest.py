import numpy as np
import pytest


def fd_grad(fn, x, h=1e-6):
    """Central differences of scalar ``fn`` at ``x``; independent of the package oracle."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xm = x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def assert_grad_close(analytic, numeric, rel=1e-5, abs_=1e-8):
    err = np.abs(analytic - numeric)
    bound = np.maximum(rel * np.abs(numeric), abs_)
    assert np.all(err <= bound), f"max err {err.max():.3e}"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
