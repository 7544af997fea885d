"""Domain types, the quadratic tracking reward and the state transition.

All monetary quantities are dimensionless: trajectories are divided by the
fund's initial net asset value before any model touches them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DataError, NumericalError

PSD_TOL = 1e-8
NORMALIZATION_TOL = 1e-9


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains non-finite values")
    arr.flags.writeable = False
    return arr


def check_psd(sigma, tol: float = PSD_TOL) -> np.ndarray:
    """Return a symmetric PSD copy of ``sigma``.

    Eigenvalues in ``[-tol, 0)`` are clipped to zero; anything more negative
    is an error.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise DataError(f"covariance must be square, got shape {sigma.shape}")
    sym = 0.5 * (sigma + sigma.T)
    if not np.allclose(sym, sigma, rtol=0.0, atol=1e-10):
        raise NumericalError("covariance matrix is not symmetric")
    w, v = np.linalg.eigh(sym)
    if w.size and w.min() < -tol:
        raise NumericalError(
            f"covariance is not positive semi-definite (min eigenvalue {w.min():.3e})"
        )
    if w.size and w.min() < 0.0:
        sym = (v * np.clip(w, 0.0, None)) @ v.T
        sym = 0.5 * (sym + sym.T)
    return sym


@dataclass(frozen=True)
class RewardParams:
    """Reward parameters: benchmark weight, growth rate, flow and cost penalties."""

    rho: float
    eta: float
    lam: float
    omega: float

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"reward parameters must be finite: {self}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.eta <= 0.0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if self.lam < 0.0 or self.omega < 0.0:
            raise ValueError("lam and omega must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.rho, self.eta, self.lam, self.omega], dtype=float)

    @classmethod
    def from_array(cls, values) -> "RewardParams":
        rho, eta, lam, omega = (float(v) for v in values)
        return cls(rho=rho, eta=eta, lam=lam, omega=omega)


@dataclass(frozen=True)
class FundTrajectory:
    """One fund's monthly sector holdings ``x_t``, trades ``u_t``, benchmark and flows.

    ``holdings`` and ``trades`` have ``horizon + 1`` rows and one column per
    sector. ``trades[t]`` is executed at ``t`` on top of ``holdings[t]``.
    """

    fund_id: str
    holdings: np.ndarray
    trades: np.ndarray
    benchmark: np.ndarray
    cashflow: np.ndarray
    normalized: bool = False
    dates: tuple[str, ...] | None = None

    def __post_init__(self):
        x = _frozen(self.holdings, 2, "holdings")
        u = _frozen(self.trades, 2, "trades")
        b = _frozen(self.benchmark, 1, "benchmark")
        c = _frozen(self.cashflow, 1, "cashflow")
        if x.shape != u.shape:
            raise DataError(
                f"fund {self.fund_id}: holdings {x.shape} and trades {u.shape} differ"
            )
        if x.shape[0] < 1 or b.shape[0] != x.shape[0] or c.shape[0] != x.shape[0]:
            raise DataError(f"fund {self.fund_id}: inconsistent number of time steps")
        object.__setattr__(self, "holdings", x)
        object.__setattr__(self, "trades", u)
        object.__setattr__(self, "benchmark", b)
        object.__setattr__(self, "cashflow", c)
        if self.dates is not None:
            dates = tuple(str(d) for d in self.dates)
            if len(dates) != x.shape[0]:
                raise DataError(f"fund {self.fund_id}: dates do not match rows")
            object.__setattr__(self, "dates", dates)
        if self.normalized:
            nav0 = x[0].sum()
            if abs(nav0 - 1.0) > NORMALIZATION_TOL or abs(b[0] - 1.0) > NORMALIZATION_TOL:
                raise DataError(
                    f"fund {self.fund_id}: flagged normalized but 1'x_0={nav0!r}, B_0={b[0]!r}"
                )

    @property
    def n_sectors(self) -> int:
        return self.holdings.shape[1]

    @property
    def horizon(self) -> int:
        return self.holdings.shape[0] - 1

    def values(self) -> np.ndarray:
        """Total portfolio value ``1'x_t`` per step."""
        return self.holdings.sum(axis=1)

    def window(self, start: int, stop: int) -> "FundTrajectory":
        """Rows ``start..stop`` inclusive. The slice is no longer normalized."""
        sl = slice(start, stop + 1)
        return FundTrajectory(
            fund_id=self.fund_id,
            holdings=self.holdings[sl],
            trades=self.trades[sl],
            benchmark=self.benchmark[sl],
            cashflow=self.cashflow[sl],
            normalized=False,
            dates=None if self.dates is None else self.dates[sl],
        )


def require_normalized(traj: FundTrajectory) -> None:
    if not traj.normalized:
        raise DataError(
            f"fund {traj.fund_id}: raw-currency trajectory; apply market.normalize first"
        )


@dataclass(frozen=True)
class MarketModel:
    """Expected sector returns per step and a constant return covariance."""

    mean_returns: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        r = _frozen(self.mean_returns, 2, "mean_returns")
        cov = check_psd(self.covariance)
        if cov.shape[0] != r.shape[1]:
            raise DataError(
                f"covariance is {cov.shape} but mean_returns has {r.shape[1]} sectors"
            )
        cov.flags.writeable = False
        object.__setattr__(self, "mean_returns", r)
        object.__setattr__(self, "covariance", cov)

    @property
    def n_sectors(self) -> int:
        return self.mean_returns.shape[1]

    @property
    def horizon(self) -> int:
        return self.mean_returns.shape[0] - 1


@dataclass(frozen=True)
class RankedDemoSet:
    """Demonstrations with their ranking scores; ``order`` sorts scores ascending."""

    trajectories: tuple[FundTrajectory, ...]
    scores: np.ndarray
    order: np.ndarray = field(init=False)

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        scores = _frozen(self.scores, 1, "scores")
        if len(trajs) != scores.shape[0]:
            raise DataError("one score per trajectory is required")
        if trajs:
            shape = trajs[0].holdings.shape
            for tr in trajs[1:]:
                if tr.holdings.shape != shape:
                    raise DataError(
                        f"fund {tr.fund_id} has shape {tr.holdings.shape}, expected {shape}"
                    )
        order = np.argsort(scores, kind="stable")
        order.flags.writeable = False
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "order", order)

    @classmethod
    def from_trajectories(cls, trajectories: Sequence[FundTrajectory]) -> "RankedDemoSet":
        """Score each trajectory by its flow-adjusted realized total return."""
        for tr in trajectories:
            require_normalized(tr)
        scores = [realized_total_return(tr) for tr in trajectories]
        return cls(tuple(trajectories), np.array(scores))

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_sectors(self) -> int:
        return self.trajectories[0].n_sectors

    @property
    def horizon(self) -> int:
        return self.trajectories[0].horizon


def target_value(x, B_t: float, params: RewardParams) -> float:
    """Target portfolio value: a blend of the benchmark and the grown current portfolio."""
    x = np.asarray(x, dtype=float)
    return params.rho * B_t + (1.0 - params.rho) * params.eta * x.sum()


def expected_reward(x, u, params: RewardParams, r_bar, sigma, B_t: float, C_t: float) -> float:
    """One-step reward with the return expectation taken in closed form.

    With ``z = x + u`` and ``V = (1 + r)'z``, ``E[(P - V)^2]`` equals
    ``(P - (1 + r_bar)'z)^2 + z' sigma z``.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    r_bar = np.asarray(r_bar, dtype=float)
    n = x.shape[0]
    if x.ndim != 1 or u.shape != (n,) or r_bar.shape != (n,):
        raise DataError("x, u and r_bar must be vectors of the same length")
    if np.shape(sigma) != (n, n):
        raise DataError(f"sigma must be {n}x{n}, got {np.shape(sigma)}")
    sigma = check_psd(sigma)
    z = x + u
    gap = target_value(x, B_t, params) - (1.0 + r_bar) @ z
    tracking = gap * gap + z @ sigma @ z
    flow = u.sum() - C_t
    return float(-tracking - params.lam * flow * flow - params.omega * (u @ u))


def propagate_state(x, u, r) -> np.ndarray:
    """Next holdings ``diag(1 + r)(x + u)``."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    r = np.asarray(r, dtype=float)
    if x.shape != u.shape or x.shape != r.shape:
        raise DataError(f"shape mismatch: x {x.shape}, u {u.shape}, r {r.shape}")
    return (1.0 + r) * (x + u)


def realized_total_return(traj: FundTrajectory) -> float:
    """Total return over the window net of investor flows.

    Flows are counted for steps ``0..T-1``, the ones that can reach ``x_T``.
    """
    values = traj.values()
    v0 = values[0]
    if v0 <= 0.0:
        raise DataError(f"fund {traj.fund_id}: initial portfolio value {v0} is not positive")
    flows = traj.cashflow[: traj.horizon].sum()
    return float((values[-1] - flows - v0) / v0)
