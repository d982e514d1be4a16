import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from trjmcmc.transport import AffineMap, FlowSpec, SplineFlow, init_flow_params, make_sas_map

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def fd_logdet(fn, x, h=1e-5):
    """log|det J| of a batched map by central differences; fn maps (N, n) -> (N, n)."""
    x = np.atleast_2d(np.asarray(x, float))
    N, n = x.shape
    J = np.empty((N, n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = h
        J[:, :, j] = (fn(x + e) - fn(x - e)) / (2 * h)
    return np.linalg.slogdet(J)[1]


def random_flow(n, seed, n_layers=2, n_bins=6, width=4):
    rng = np.random.default_rng(seed)
    spec = FlowSpec(n_layers=n_layers, n_bins=n_bins, hidden_per_dim=width)
    shift = rng.normal(size=n)
    scale = np.exp(rng.normal(scale=0.3, size=n))
    return SplineFlow(init_flow_params(n, spec, shift=shift, scale=scale, rng=rng, zero_last=False))


def random_sas(n, seed):
    rng = np.random.default_rng(seed)
    L = np.tril(rng.normal(scale=0.4, size=(n, n)), -1) + np.diag(np.exp(rng.normal(scale=0.3, size=n)))
    return make_sas_map(rng.normal(size=n), np.exp(rng.normal(scale=0.3, size=n)), L)


def random_affine(n, seed):
    rng = np.random.default_rng(seed)
    L = np.tril(rng.normal(scale=0.4, size=(n, n)), -1) + np.diag(np.exp(rng.normal(scale=0.3, size=n)))
    return AffineMap(rng.normal(size=n), L)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance report ---------------------------------------------------------

ACCEPTANCE_LINES = []


def report_criterion(number, title, passed, detail):
    """Record one pass/fail line; all lines are printed again in the terminal summary."""
    line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
