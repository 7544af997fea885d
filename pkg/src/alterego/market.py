"""Data preparation: normalization, per-sector ARMA forecasts, residual covariance, trade prior."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize, signal

from .core import FundTrajectory, MarketModel
from .errors import DataError
from .glearner import PriorPolicy

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-10
MIN_OBS = 12


def normalize(traj: FundTrajectory, benchmark_series) -> FundTrajectory:
    """Express a fund in units of its initial NAV, with the benchmark rescaled to match.

    ``benchmark_series`` holds index levels aligned with the trajectory rows;
    only its relative moves matter.
    """
    bench = np.asarray(benchmark_series, dtype=float)
    if bench.shape != (traj.horizon + 1,):
        raise DataError(
            f"fund {traj.fund_id}: benchmark has {bench.shape[0]} points, "
            f"trajectory has {traj.horizon + 1}"
        )
    if not np.all(np.isfinite(bench)) or bench[0] <= 0.0:
        raise DataError("benchmark series must be finite with a positive first value")
    nav0 = traj.holdings[0].sum()
    if not nav0 > 0.0:
        raise DataError(f"fund {traj.fund_id}: initial NAV {nav0} is not positive")
    return FundTrajectory(
        fund_id=traj.fund_id,
        holdings=traj.holdings / nav0,
        trades=traj.trades / nav0,
        benchmark=bench / bench[0],
        cashflow=traj.cashflow / nav0,
        normalized=True,
        dates=traj.dates,
    )


@dataclass(frozen=True)
class ArmaSpec:
    """Per-sector ARMA(p, q) model; unfitted until ``fitted`` is set.

    Per sector ``k``: ``y_t = const_k + sum_i ar_k[i] y_{t-1-i} + e_t + sum_j ma_k[j] e_{t-1-j}``.
    ``history`` and ``residuals`` keep the fitted sample the forecasts condition on.
    """

    p: int = 1
    q: int = 1
    const: np.ndarray | None = None
    ar: np.ndarray | None = None
    ma: np.ndarray | None = None
    sigma2: np.ndarray | None = None
    fallback: np.ndarray | None = None
    history: np.ndarray | None = field(default=None, repr=False)
    residuals: np.ndarray | None = field(default=None, repr=False)
    fitted_values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.p < 0 or self.q < 0:
            raise ValueError("ARMA orders must be non-negative")

    @property
    def fitted(self) -> bool:
        return self.const is not None

    @property
    def mean(self) -> np.ndarray:
        """Unconditional mean per sector."""
        return self.const / (1.0 - self.ar.sum(axis=1))


def _css_residuals(y: np.ndarray, c: float, phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """Innovations for t >= p with pre-sample innovations set to zero."""
    p = phi.shape[0]
    n = y.shape[0]
    w = y[p:] - c
    for i in range(p):
        w = w - phi[i] * y[p - 1 - i : n - 1 - i]
    e = np.zeros(n)
    e[p:] = signal.lfilter([1.0], np.r_[1.0, theta], w)
    return e


def _is_stationary(phi: np.ndarray) -> bool:
    if phi.size == 0:
        return True
    # roots of 1 - phi_1 z - ... - phi_p z^p outside the unit circle
    roots = np.roots(np.r_[-phi[::-1], 1.0])
    return bool(np.all(np.abs(roots) > 1.0 + 1e-8))


def _is_invertible(theta: np.ndarray) -> bool:
    if theta.size == 0:
        return True
    roots = np.roots(np.r_[theta[::-1], 1.0])
    return bool(np.all(np.abs(roots) > 1.0 + 1e-8))


def _fit_one(y: np.ndarray, p: int, q: int):
    n = y.shape[0]
    ybar = y.mean()
    if np.std(y) < 1e-12:
        return ybar, np.zeros(p), np.zeros(q), True
    # start from an OLS AR(p) fit
    if p > 0:
        X = np.column_stack([np.ones(n - p)] + [y[p - 1 - i : n - 1 - i] for i in range(p)])
        beta0, *_ = np.linalg.lstsq(X, y[p:], rcond=None)
    else:
        beta0 = np.array([ybar])
    x0 = np.r_[beta0, np.zeros(q)]

    def resid(params):
        return _css_residuals(y, params[0], params[1 : 1 + p], params[1 + p :])[p:]

    try:
        sol = optimize.least_squares(resid, x0, method="lm", xtol=1e-12, ftol=1e-12)
        ok = sol.success and np.all(np.isfinite(sol.x))
    except (ValueError, np.linalg.LinAlgError):
        ok = False
    if ok:
        c, phi, theta = sol.x[0], sol.x[1 : 1 + p], sol.x[1 + p :]
        if _is_stationary(phi) and _is_invertible(theta):
            return c, phi, theta, False
    return ybar, np.zeros(p), np.zeros(q), True


def fit_forecaster(sector_returns, spec: ArmaSpec | None = None) -> ArmaSpec:
    """Fit independent ARMA(p, q) models per sector by conditional least squares.

    Sectors whose fit fails, is non-stationary or non-invertible fall back to
    the sample mean with ``fallback[k] = True``.
    """
    spec = spec or ArmaSpec()
    y = np.asarray(sector_returns, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    n, k = y.shape
    if n < max(MIN_OBS, spec.p + spec.q + 2):
        raise DataError(f"ARMA fit needs at least {MIN_OBS} observations, got {n}")
    if not np.all(np.isfinite(y)):
        raise DataError("sector returns contain non-finite values")
    p, q = spec.p, spec.q
    const = np.empty(k)
    ar = np.zeros((k, p))
    ma = np.zeros((k, q))
    fallback = np.zeros(k, dtype=bool)
    resid = np.zeros((n, k))
    for j in range(k):
        c, phi, theta, fb = _fit_one(y[:, j], p, q)
        const[j], ar[j], ma[j], fallback[j] = c, phi, theta, fb
        if fb:
            logger.info("sector %d: ARMA fit fell back to the sample mean", j)
        resid[:, j] = _css_residuals(y[:, j], c, phi, theta)
    resid = resid[p:]
    return replace(
        spec,
        const=const,
        ar=ar,
        ma=ma,
        sigma2=(resid**2).mean(axis=0),
        fallback=fallback,
        history=y,
        residuals=resid,
        fitted_values=y[p:] - resid,
    )


def forecast(fitted: ArmaSpec, horizon: int) -> np.ndarray:
    """Multi-step mean forecasts ``horizon x N`` following the last observation."""
    if not fitted.fitted:
        raise ValueError("ArmaSpec has not been fitted")
    p, q = fitted.p, fitted.q
    y_hist = fitted.history
    n, k = y_hist.shape
    e_hist = np.zeros((n, k))
    e_hist[p:] = fitted.residuals
    out = np.empty((horizon, k))
    for j in range(k):
        ys = list(y_hist[:, j])
        es = list(e_hist[:, j])
        for h in range(horizon):
            pred = fitted.const[j]
            for i in range(p):
                pred += fitted.ar[j, i] * ys[-1 - i]
            for m in range(q):
                pred += fitted.ma[j, m] * es[-1 - m]
            ys.append(pred)
            es.append(0.0)
            out[h, j] = pred
    return out


def in_sample_means(fitted: ArmaSpec) -> np.ndarray:
    """One-step-ahead predictions for every observed row.

    The first ``p`` rows, which the conditional fit cannot predict, get the
    unconditional mean.
    """
    n, k = fitted.history.shape
    out = np.empty((n, k))
    out[: fitted.p] = fitted.mean
    out[fitted.p :] = fitted.fitted_values
    return out


def estimate_covariance(residuals, shrinkage: float = 0.0, floor: float = VAR_FLOOR) -> np.ndarray:
    """Sample covariance of residuals, optionally shrunk toward its diagonal, eigen-floored.

    ``shrinkage`` in ``[0, 1]`` blends ``(1 - s) * S + s * diag(S)``.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim != 2 or r.shape[0] < 1:
        raise DataError(f"residuals must be a non-empty 2-D array, got {r.shape}")
    if not 0.0 <= shrinkage <= 1.0:
        raise ValueError("shrinkage must lie in [0, 1]")
    # maximum-likelihood (1/T) normalization
    cov = np.cov(r, rowvar=False, ddof=0).reshape(r.shape[1], r.shape[1])
    if shrinkage:
        cov = (1.0 - shrinkage) * cov + shrinkage * np.diag(np.diag(cov))
    w, v = np.linalg.eigh(0.5 * (cov + cov.T))
    cov = (v * np.maximum(w, floor)) @ v.T
    return 0.5 * (cov + cov.T)


def fit_prior(trades, full_covariance: bool = False, floor: float = VAR_FLOOR) -> PriorPolicy:
    """Gaussian prior over trades with constant mean and per-sector variances."""
    u = np.asarray(trades, dtype=float)
    if u.ndim != 2 or u.shape[0] == 0:
        raise DataError("fit_prior needs a non-empty 2-D array of trades")
    if u.shape[0] < 2:
        raise DataError("fit_prior needs at least two trade vectors")
    mean = u.mean(axis=0)
    if full_covariance:
        cov = estimate_covariance(u, floor=floor)
    else:
        cov = np.diag(np.maximum(u.var(axis=0), floor))
    return PriorPolicy(mean, cov)


def implied_sector_returns(trajectories) -> np.ndarray:
    """Realized sector returns backed out of holdings, averaged over funds.

    ``r_t = x_{t+1} / (x_t + u_t) - 1``; positions near zero are skipped.
    """
    ratios = []
    for tr in trajectories:
        base = tr.holdings[:-1] + tr.trades[:-1]
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(np.abs(base) > 1e-12, tr.holdings[1:] / base - 1.0, np.nan)
        ratios.append(r)
    stacked = np.stack(ratios)
    if np.any(np.all(np.isnan(stacked), axis=0)):
        raise DataError("cannot infer sector returns: a sector has no position in any fund")
    return np.nanmean(stacked, axis=0)


def build_market_model(
    sector_returns,
    spec: ArmaSpec | None = None,
    shrinkage: float = 0.0,
) -> tuple[MarketModel, ArmaSpec]:
    """Market model for a window with ``T`` realized returns (``T x N``).

    Row ``t < T`` of the mean is the one-step ARMA prediction of ``r_t``; row
    ``T`` is the out-of-sample forecast one step past the window.
    """
    fitted = fit_forecaster(sector_returns, spec)
    means = np.vstack([in_sample_means(fitted), forecast(fitted, 1)])
    cov = estimate_covariance(fitted.residuals, shrinkage=shrinkage)
    return MarketModel(means, cov), fitted


def forecast_market_model(fitted: ArmaSpec, horizon: int, shrinkage: float = 0.0) -> MarketModel:
    """Market model for ``horizon`` steps after the fitted sample (``horizon + 1`` rows)."""
    means = forecast(fitted, horizon + 1)
    cov = estimate_covariance(fitted.residuals, shrinkage=shrinkage)
    return MarketModel(means, cov)
