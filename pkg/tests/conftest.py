import numpy as np
import pytest

from grassflow import field as fieldmod
from grassflow.prior import GrassmannGaussianPrior


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def sphere_prior():
    return GrassmannGaussianPrior.isotropic(np.array([[1.0], [0.0], [0.0]]), 0.09)


@pytest.fixture
def small_params():
    """A narrow random field on Gr(1, 3), cheap enough for solver tests."""
    return fieldmod.init((3, 1), (3, 16, 16, 1), seed=7)


def central_diff(f, x, h=1e-6):
    """Gradient of scalar f at array x by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)

    def fs(z):
        return np.asarray(f(z), dtype=np.float64).reshape(())

    for idx in np.ndindex(x.shape):
        step = h * (1.0 + abs(x[idx]))
        xp = x.copy()
        xm = x.copy()
        xp[idx] += step
        xm[idx] -= step
        g[idx] = (fs(xp) - fs(xm)) / (2.0 * step)
    return g


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
