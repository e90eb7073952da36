import numpy as np
import pytest

from svcblock.covariance import chol, correlation, distance_matrix
from svcblock.mcmc import McmcConfig
from svcblock.model import Dataset


def make_dataset(n=30, p=1, seed=0, sigma2=1.0, phi=3.0, tau2=0.2, beta=None, slope_sigma2=0.0,
                 extent=1.0):
    """Synthetic SVI (or SVC when ``slope_sigma2 > 0``) data on a square."""
    rng = np.random.default_rng(seed)
    coords = rng.uniform(0, extent, (n, 2))
    X = rng.uniform(0, 2, (n, p))
    beta = np.arange(1.0, p + 2) if beta is None else np.asarray(beta, dtype=float)
    R = correlation(distance_matrix(coords), phi)
    y = np.column_stack([np.ones(n), X]) @ beta + rng.normal(0, np.sqrt(tau2), n)
    if sigma2 > 0:
        y += chol(sigma2 * R) @ rng.standard_normal(n)
    if slope_sigma2 > 0:
        y += X[:, 0] * (chol(slope_sigma2 * R) @ rng.standard_normal(n))
    names = tuple(f"x{j + 1}" for j in range(p))
    return Dataset(coords, y, X, names)


@pytest.fixture
def small_cfg():
    return McmcConfig(n_chains=2, n_iterations=1200, burn_in=400, thinning=4, seed=11)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance(request):
    """Record an acceptance line; the check fails the test when ``ok`` is false."""
    def report(number, title, ok, detail, elapsed, budget):
        ok = bool(ok) and elapsed < budget
        line = (f"acceptance #{number:<2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} "
                f"[{elapsed:.1f} s, budget {budget:g} s]")
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
