"""Synthetic fund populations with a planted reward.

Each simulated manager computes the myopic optimal trade for the planted
reward and executes a skill-weighted blend of it with a passive
flow-following trade, plus Gaussian noise. Sector returns are multivariate
Gaussian; the benchmark is the market-weighted sector return.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import FundTrajectory, RankedDemoSet, RewardParams, check_psd, propagate_state
from .glearner import greedy_action, reward_coefficients

# Initial weights are multiples of 2**-20 so they sum to exactly 1.0.
_WEIGHT_QUANTUM = 2**20


def default_return_cov(n: int, annual_vol: float = 0.18, corr: float = 0.6) -> np.ndarray:
    """Monthly covariance with equal sector volatility and constant correlation."""
    monthly_var = annual_vol**2 / 12.0
    c = np.full((n, n), corr)
    np.fill_diagonal(c, 1.0)
    return monthly_var * c


def _default_mean(n: int) -> np.ndarray:
    return np.linspace(0.04, 0.12, n)


def default_skills(n: int) -> np.ndarray:
    """One unskilled fund, then geometrically spaced skills up to 1.

    Even a small weight on the optimal trade moves a fund most of the way to
    the target, so linear spacing leaves the upper funds nearly identical.
    """
    if n == 1:
        return np.ones(1)
    return np.r_[0.0, np.geomspace(0.04, 1.0, n - 1)]


@dataclass(frozen=True)
class SimConfig:
    n_sectors: int = 11
    horizon: int = 24
    n_funds: int = 6
    planted: RewardParams = field(default_factory=lambda: RewardParams(0.9, 2.0, 0.1, 0.1))
    skill_levels: tuple[float, ...] | None = None
    trade_noise: float = 0.001
    return_mean: tuple[float, ...] | None = None
    return_cov: np.ndarray | None = field(default=None, repr=False)
    market_weights: tuple[float, ...] | None = None
    cashflow_scale: float = 0.002
    weight_dispersion: float = 0.1
    start_date: str = "2017-01"
    seed: int = 0

    def __post_init__(self):
        n = self.n_sectors
        if n < 1 or self.horizon < 1 or self.n_funds < 1:
            raise ValueError("n_sectors, horizon and n_funds must be positive")
        skill = (
            default_skills(self.n_funds)
            if self.skill_levels is None
            else np.asarray(self.skill_levels, dtype=float)
        )
        if skill.shape != (self.n_funds,) or np.any((skill < 0) | (skill > 1)):
            raise ValueError("skill_levels needs one value in [0, 1] per fund")
        mean = _default_mean(n) if self.return_mean is None else np.asarray(self.return_mean, float)
        cov = default_return_cov(n) if self.return_cov is None else np.asarray(self.return_cov, float)
        weights = (
            np.full(n, 1.0 / n) if self.market_weights is None else np.asarray(self.market_weights, float)
        )
        if mean.shape != (n,) or cov.shape != (n, n) or weights.shape != (n,):
            raise ValueError("return_mean, return_cov and market_weights must match n_sectors")
        if np.any(weights < 0) or not weights.sum() > 0:
            raise ValueError("market_weights must be non-negative and not all zero")
        if self.trade_noise < 0 or self.cashflow_scale < 0:
            raise ValueError("trade_noise and cashflow_scale must be non-negative")
        object.__setattr__(self, "skill_levels", tuple(float(s) for s in skill))
        object.__setattr__(self, "return_mean", tuple(float(m) for m in mean))
        object.__setattr__(self, "return_cov", check_psd(cov))
        object.__setattr__(self, "market_weights", tuple(float(w) for w in weights / weights.sum()))

    @property
    def monthly_mean(self) -> np.ndarray:
        return np.asarray(self.return_mean) / 12.0


@dataclass(frozen=True)
class MarketPath:
    returns: np.ndarray  # T x N, r_t takes holdings from t to t+1
    benchmark: np.ndarray  # T + 1 index levels, starting at 1
    dates: tuple[str, ...]


def month_range(start: str, count: int) -> tuple[str, ...]:
    """``count`` consecutive ISO ``YYYY-MM`` months from ``start``."""
    year, month = (int(p) for p in start.split("-"))
    out = []
    for k in range(count):
        m = month - 1 + k
        out.append(f"{year + m // 12:04d}-{m % 12 + 1:02d}")
    return tuple(out)


def _seeds(cfg: SimConfig) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(cfg.seed).spawn(cfg.n_funds + 1)


def generate_market_path(cfg: SimConfig) -> MarketPath:
    rng = np.random.default_rng(_seeds(cfg)[0])
    w, v = np.linalg.eigh(cfg.return_cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    shocks = rng.standard_normal((cfg.horizon, cfg.n_sectors))
    returns = cfg.monthly_mean + shocks @ root.T
    bench_ret = returns @ np.asarray(cfg.market_weights)
    benchmark = np.concatenate([[1.0], np.cumprod(1.0 + bench_ret)])
    return MarketPath(returns, benchmark, month_range(cfg.start_date, cfg.horizon + 1))


def _initial_weights(cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    raw = np.asarray(cfg.market_weights) * np.exp(cfg.weight_dispersion * rng.standard_normal(cfg.n_sectors))
    counts = np.floor(raw / raw.sum() * _WEIGHT_QUANTUM).astype(np.int64)
    counts[np.argmax(counts)] += _WEIGHT_QUANTUM - counts.sum()
    return counts / _WEIGHT_QUANTUM


def simulate_fund(
    cfg: SimConfig, path: MarketPath, skill: float, rng: np.random.Generator, fund_id: str
) -> FundTrajectory:
    T, n = cfg.horizon, cfg.n_sectors
    r_bar = cfg.monthly_mean
    x = np.empty((T + 1, n))
    u = np.empty((T + 1, n))
    c = np.empty(T + 1)
    x[0] = _initial_weights(cfg, rng)
    for t in range(T + 1):
        value = x[t].sum()
        c[t] = cfg.cashflow_scale * value * rng.standard_normal()
        reward = reward_coefficients(cfg.planted, r_bar, cfg.return_cov, path.benchmark[t], c[t])
        u_star = greedy_action(reward, x[t])
        # passive trade: invest the flow pro rata to current holdings
        u_passive = c[t] * x[t] / value
        u[t] = skill * u_star + (1.0 - skill) * u_passive + cfg.trade_noise * rng.standard_normal(n)
        if t < T:
            x[t + 1] = propagate_state(x[t], u[t], path.returns[t])
    return FundTrajectory(
        fund_id=fund_id,
        holdings=x,
        trades=u,
        benchmark=path.benchmark,
        cashflow=c,
        normalized=True,
        dates=path.dates,
    )


def fund_ids(n: int) -> list[str]:
    return [f"S{k + 1}" for k in range(n)]


def generate_funds(cfg: SimConfig, path: MarketPath | None = None) -> RankedDemoSet:
    """Simulate every fund on the shared market path and rank by realized return."""
    path = path or generate_market_path(cfg)
    seeds = _seeds(cfg)[1:]
    trajs = [
        simulate_fund(cfg, path, skill, np.random.default_rng(seed), fid)
        for skill, seed, fid in zip(cfg.skill_levels, seeds, fund_ids(cfg.n_funds))
    ]
    return RankedDemoSet.from_trajectories(trajs)
