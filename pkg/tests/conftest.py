import numpy as np
import pytest

from alterego import simgen
from alterego.core import FundTrajectory, MarketModel, RewardParams
from alterego.glearner import PriorPolicy


def random_psd(rng, n, scale=0.01):
    a = rng.standard_normal((n, n))
    return scale * (a @ a.T / n + 0.1 * np.eye(n))


def random_params(rng):
    return RewardParams(
        rho=float(rng.uniform(0.05, 0.95)),
        eta=float(rng.uniform(0.5, 2.0)),
        lam=float(rng.uniform(0.01, 1.0)),
        omega=float(rng.uniform(0.01, 1.0)),
    )


def random_prior(rng, n, scale=0.05):
    return PriorPolicy(0.01 * rng.standard_normal(n), np.diag(scale * rng.uniform(0.5, 1.5, n)))


def random_trajectory(rng, n, T, fund_id="F"):
    x0 = rng.uniform(0.5, 1.5, n)
    x0 = x0 / x0.sum()
    r = 0.01 + 0.05 * rng.standard_normal((T, n))
    u = 0.02 * rng.standard_normal((T + 1, n))
    x = np.empty((T + 1, n))
    x[0] = x0
    for t in range(T):
        x[t + 1] = (1 + r[t]) * (x[t] + u[t])
    bench = np.concatenate([[1.0], np.cumprod(1 + r.mean(axis=1))])
    c = 0.01 * rng.standard_normal(T + 1)
    return FundTrajectory(fund_id, x, u, bench, c, normalized=True), r


def random_market(rng, n, T):
    return MarketModel(0.01 + 0.01 * rng.standard_normal((T + 1, n)), random_psd(rng, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def fixture_cfg():
    return simgen.SimConfig(seed=0)


@pytest.fixture(scope="session")
def fixture_demos(fixture_cfg):
    return simgen.generate_funds(fixture_cfg)


@pytest.fixture(scope="session")
def fixture_market(fixture_cfg):
    T = fixture_cfg.horizon
    return MarketModel(np.tile(fixture_cfg.monthly_mean, (T + 1, 1)), fixture_cfg.return_cov)


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion."""

    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {name}: {detail}"
        _ACCEPTANCE.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
