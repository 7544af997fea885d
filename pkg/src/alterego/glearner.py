"""KL-regularized finite-horizon control with quadratic values and Gaussian policies.

With a quadratic reward, a Gaussian prior over trades and the multiplicative
return dynamics ``x' = diag(1 + r)(x + u)``, the action-value ``G_t`` and the
free energy ``F_t`` stay quadratic, so the backward recursion only moves
coefficient matrices around. The optimal policy at each step is Gaussian,
``pi_t(u|x) ∝ pi_0(u) exp(beta (G_t(x, u) - F_t(x)))``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize

from .core import MarketModel, RewardParams, check_psd
from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)

SYM_TOL = 1e-10


def _sym(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def _check_sym(m: np.ndarray, name: str) -> np.ndarray:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DataError(f"{name} must be square, got {m.shape}")
    if np.max(np.abs(m - m.T), initial=0.0) > SYM_TOL * max(1.0, np.max(np.abs(m), initial=0.0)):
        raise NumericalError(f"{name} is not symmetric")
    return _sym(m)


def _chol(m: np.ndarray, message: str) -> np.ndarray:
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(message) from exc


@dataclass(frozen=True)
class QuadraticValue:
    """``F(x) = x'Pxx x + px'x + p0``."""

    Pxx: np.ndarray
    px: np.ndarray
    p0: float

    def __post_init__(self):
        object.__setattr__(self, "Pxx", _check_sym(self.Pxx, "Pxx"))
        object.__setattr__(self, "px", np.asarray(self.px, dtype=float))
        object.__setattr__(self, "p0", float(self.p0))

    @classmethod
    def zeros(cls, n: int) -> "QuadraticValue":
        return cls(np.zeros((n, n)), np.zeros(n), 0.0)

    def __call__(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.Pxx @ x + self.px @ x + self.p0)


@dataclass(frozen=True)
class QuadraticQ:
    """``G(x, u) = u'Quu u + u'Qux x + x'Qxx x + qu'u + qx'x + q0``."""

    Quu: np.ndarray
    Qux: np.ndarray
    Qxx: np.ndarray
    qu: np.ndarray
    qx: np.ndarray
    q0: float

    def __post_init__(self):
        object.__setattr__(self, "Quu", _check_sym(self.Quu, "Quu"))
        object.__setattr__(self, "Qxx", _check_sym(self.Qxx, "Qxx"))
        object.__setattr__(self, "Qux", np.asarray(self.Qux, dtype=float))
        object.__setattr__(self, "qu", np.asarray(self.qu, dtype=float))
        object.__setattr__(self, "qx", np.asarray(self.qx, dtype=float))
        object.__setattr__(self, "q0", float(self.q0))

    @property
    def n(self) -> int:
        return self.Quu.shape[0]

    def __call__(self, x, u) -> float:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return float(
            u @ self.Quu @ u
            + u @ self.Qux @ x
            + x @ self.Qxx @ x
            + self.qu @ u
            + self.qx @ x
            + self.q0
        )

    def __add__(self, other: "QuadraticQ") -> "QuadraticQ":
        return QuadraticQ(
            self.Quu + other.Quu,
            self.Qux + other.Qux,
            self.Qxx + other.Qxx,
            self.qu + other.qu,
            self.qx + other.qx,
            self.q0 + other.q0,
        )

    def scaled(self, c: float) -> "QuadraticQ":
        return QuadraticQ(
            c * self.Quu, c * self.Qux, c * self.Qxx, c * self.qu, c * self.qx, c * self.q0
        )

    def check_curvature(self) -> None:
        """Raise unless ``Quu`` is negative definite."""
        _chol(-self.Quu, "degenerate action-value curvature: Quu is not negative definite")


@dataclass(frozen=True)
class PolicyStep:
    """Gaussian policy at one step: ``u ~ N(intercept + gain @ x, cov)``."""

    intercept: np.ndarray
    gain: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = _check_sym(self.cov, "policy covariance")
        _chol(cov, "policy covariance is not positive definite")
        object.__setattr__(self, "intercept", np.asarray(self.intercept, dtype=float))
        object.__setattr__(self, "gain", np.asarray(self.gain, dtype=float))
        object.__setattr__(self, "cov", cov)

    def mean(self, x) -> np.ndarray:
        return self.intercept + self.gain @ np.asarray(x, dtype=float)

    def logpdf(self, u, x) -> float:
        d = np.asarray(u, dtype=float) - self.mean(x)
        L = np.linalg.cholesky(self.cov)
        y = np.linalg.solve(L, d)
        n = d.shape[0]
        return float(-0.5 * y @ y - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi))


@dataclass(frozen=True)
class GaussianPolicy:
    """Time-indexed sequence of Gaussian policy steps, ``t = 0..T``."""

    steps: tuple[PolicyStep, ...]

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))

    def __len__(self) -> int:
        return len(self.steps)

    def __getitem__(self, t: int) -> PolicyStep:
        return self.steps[t]

    def __iter__(self):
        return iter(self.steps)

    @property
    def horizon(self) -> int:
        return len(self.steps) - 1


@dataclass(frozen=True)
class PriorPolicy:
    """State-independent Gaussian prior over trades."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        cov = _check_sym(self.cov, "prior covariance")
        mean = np.asarray(self.mean, dtype=float)
        if mean.shape != (cov.shape[0],):
            raise DataError("prior mean and covariance dimensions differ")
        _chol(cov, "prior covariance is not positive definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def precision(self) -> np.ndarray:
        return _sym(np.linalg.inv(self.cov))


@dataclass(frozen=True)
class GlearnerConfig:
    beta: float = 1.0
    gamma: float = 1.0
    max_outer_iters: int = 1
    outer_tol: float = 1e-8

    def __post_init__(self):
        if not self.beta > 0.0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")


def reward_coefficients(params: RewardParams, r_bar, sigma, B_t: float, C_t: float) -> QuadraticQ:
    """Quadratic-form coefficients of :func:`core.expected_reward` in ``(x, u)``."""
    r_bar = np.asarray(r_bar, dtype=float)
    n = r_bar.shape[0]
    sigma = check_psd(sigma)
    if sigma.shape != (n, n):
        raise DataError(f"sigma must be {n}x{n}")
    a = 1.0 + r_bar
    ones = np.ones(n)
    c0 = params.rho * B_t
    # tracking gap = c0 + g'x - a'u
    g = (1.0 - params.rho) * params.eta * ones - a
    Quu = -(np.outer(a, a) + sigma + params.lam * np.outer(ones, ones) + params.omega * np.eye(n))
    Qux = 2.0 * np.outer(a, g) - 2.0 * sigma
    Qxx = -(np.outer(g, g) + sigma)
    qu = 2.0 * c0 * a + 2.0 * params.lam * C_t * ones
    qx = -2.0 * c0 * g
    q0 = -c0 * c0 - params.lam * C_t * C_t
    return QuadraticQ(_sym(Quu), Qux, _sym(Qxx), qu, qx, q0)


def expected_next_value(F_next: QuadraticValue, r_bar, sigma) -> QuadraticQ:
    """``E[F_next(diag(1 + r)(x + u))]`` for returns with mean ``r_bar``, covariance ``sigma``."""
    r_bar = np.asarray(r_bar, dtype=float)
    n = r_bar.shape[0]
    if F_next.Pxx.shape != (n, n) or np.shape(sigma) != (n, n):
        raise DataError("dimension mismatch between value function and return moments")
    a = 1.0 + r_bar
    # E[a_i a_j] = a_i a_j + sigma_ij
    M = _sym(F_next.Pxx * (np.outer(a, a) + np.asarray(sigma, dtype=float)))
    lin = F_next.px * a
    return QuadraticQ(M, 2.0 * M, M, lin, lin, F_next.p0)


def action_value_update(
    F_next: QuadraticValue, reward_t: QuadraticQ, gamma: float, r_bar, sigma
) -> QuadraticQ:
    G = reward_t + expected_next_value(F_next, r_bar, sigma).scaled(gamma)
    G.check_curvature()
    return G


def _precision(G: QuadraticQ, prior: PriorPolicy, beta: float) -> tuple[np.ndarray, np.ndarray]:
    """Posterior precision ``S^-1 - 2 beta Quu`` and its inverse."""
    Lam = _sym(prior.precision - 2.0 * beta * G.Quu)
    L = _chol(Lam, f"beta={beta} too large for prior covariance: policy precision not PD")
    W = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(Lam.shape[0])))
    return Lam, _sym(W)


def value_update(G_t: QuadraticQ, prior: PriorPolicy, beta: float) -> QuadraticValue:
    """Free energy ``F(x) = (1/beta) log E_{u~prior}[exp(beta G(x, u))]`` in closed form.

    The terms are arranged so the ``beta -> 0`` limit carries no cancellation:
    everything reduces to the prior expectation of ``G`` plus ``O(beta)``.
    """
    if not beta > 0.0:
        raise ValueError("beta must be positive")
    mu = prior.mean
    _, W = _precision(G_t, prior, beta)
    Quu, Qux = G_t.Quu, G_t.Qux
    h0 = 2.0 * Quu @ mu + G_t.qu  # gradient of G in u at the prior mean, x-free part
    Wh0 = W @ h0
    Pxx = G_t.Qxx + 0.5 * beta * Qux.T @ W @ Qux
    px = G_t.qx + Qux.T @ mu + beta * Qux.T @ Wh0
    # log det(S Lam) = log det(I - 2 beta L' Quu L), S = L L'
    Ls = np.linalg.cholesky(prior.cov)
    K = _sym(-2.0 * beta * Ls.T @ Quu @ Ls)
    logdet = np.log1p(np.linalg.eigvalsh(K)).sum()
    p0 = G_t.q0 + mu @ Quu @ mu + G_t.qu @ mu + 0.5 * beta * h0 @ Wh0 - logdet / (2.0 * beta)
    return QuadraticValue(_sym(Pxx), px, p0)


def terminal_init(reward_T: QuadraticQ) -> tuple[QuadraticQ, QuadraticValue]:
    """Terminal action-value and the value of the greedy one-step trade.

    The greedy trade solves ``dR/du = 0``: ``u*(x) = -(2 Quu)^-1 (Qux x + qu)``.
    """
    reward_T.check_curvature()
    Quu, Qux, qu = reward_T.Quu, reward_T.Qux, reward_T.qu
    A = np.linalg.solve(Quu, Qux)
    b = np.linalg.solve(Quu, qu)
    Pxx = reward_T.Qxx - 0.25 * Qux.T @ A
    px = reward_T.qx - 0.5 * Qux.T @ b
    p0 = reward_T.q0 - 0.25 * qu @ b
    return reward_T, QuadraticValue(_sym(Pxx), px, p0)


def greedy_action(reward: QuadraticQ, x) -> np.ndarray:
    """Maximizer over ``u`` of a concave quadratic action-value at state ``x``."""
    reward.check_curvature()
    h = reward.Qux @ np.asarray(x, dtype=float) + reward.qu
    return -0.5 * np.linalg.solve(reward.Quu, h)


def extract_policy(G_t: QuadraticQ, F_t: QuadraticValue, prior: PriorPolicy, beta: float) -> PolicyStep:
    """Gaussian policy ``pi_0(u) exp(beta (G - F))``.

    ``F_t`` is accepted for symmetry with the recursion; the Gaussian is fully
    determined by ``G_t`` and the prior, and ``F_t`` from :func:`value_update`
    is exactly its log-normalizer.
    """
    del F_t
    _, W = _precision(G_t, prior, beta)
    h0 = 2.0 * G_t.Quu @ prior.mean + G_t.qu
    intercept = prior.mean + beta * W @ h0
    gain = beta * W @ G_t.Qux
    return PolicyStep(intercept, gain, W)


def kl_to_prior(step: PolicyStep, prior: PriorPolicy, x) -> float:
    """``KL(pi(.|x) || pi_0)`` for Gaussians."""
    n = prior.mean.shape[0]
    P0 = prior.precision
    d = prior.mean - step.mean(x)
    _, logdet0 = np.linalg.slogdet(prior.cov)
    _, logdet1 = np.linalg.slogdet(step.cov)
    return float(0.5 * (np.trace(P0 @ step.cov) + d @ P0 @ d - n + logdet0 - logdet1))


def recommend(step: PolicyStep, x) -> np.ndarray:
    """Mode of the Gaussian policy at state ``x``."""
    return step.mean(x)


def _rewards(market: MarketModel, params: RewardParams, benchmark, cashflow) -> list[QuadraticQ]:
    benchmark = np.asarray(benchmark, dtype=float)
    cashflow = np.asarray(cashflow, dtype=float)
    T = market.horizon
    if benchmark.shape != (T + 1,) or cashflow.shape != (T + 1,):
        raise DataError(
            f"benchmark and cashflow must have {T + 1} entries to match the market model"
        )
    return [
        reward_coefficients(params, market.mean_returns[t], market.covariance, benchmark[t], cashflow[t])
        for t in range(T + 1)
    ]


def backward_sweep(
    market: MarketModel,
    params: RewardParams,
    prior: PriorPolicy,
    benchmark,
    cashflow,
    beta: float,
    gamma: float,
) -> tuple[list[QuadraticQ], list[QuadraticValue]]:
    """Action-values ``G_t`` and values ``F_t`` for ``t = 0..T``."""
    rewards = _rewards(market, params, benchmark, cashflow)
    T = market.horizon
    G: list[QuadraticQ] = [None] * (T + 1)  # type: ignore[list-item]
    F: list[QuadraticValue] = [None] * (T + 1)  # type: ignore[list-item]
    t = T
    try:
        G[T], F[T] = terminal_init(rewards[T])
        for t in range(T - 1, -1, -1):
            G[t] = action_value_update(
                F[t + 1], rewards[t], gamma, market.mean_returns[t], market.covariance
            )
            F[t] = value_update(G[t], prior, beta)
    except NumericalError as exc:
        raise NumericalError(f"t={t}: {exc}") from exc
    return G, F


def _policy_delta(a: GaussianPolicy, b: GaussianPolicy) -> float:
    return max(
        max(
            np.max(np.abs(s.intercept - o.intercept)),
            np.max(np.abs(s.gain - o.gain)),
            np.max(np.abs(s.cov - o.cov)),
        )
        for s, o in zip(a, b)
    )


def solve(
    market: MarketModel,
    params: RewardParams,
    prior: PriorPolicy,
    benchmark,
    cashflow,
    cfg: GlearnerConfig,
) -> GaussianPolicy:
    """Optimal Gaussian policy for every step ``t = 0..T``.

    The sweep is repeated until policy parameters move less than
    ``cfg.outer_tol``; with a fixed prior one sweep is already exact.
    """
    policy = None
    for it in range(cfg.max_outer_iters):
        G, F = backward_sweep(market, params, prior, benchmark, cashflow, cfg.beta, cfg.gamma)
        steps = []
        for t in range(len(G)):
            try:
                steps.append(extract_policy(G[t], F[t], prior, cfg.beta))
            except NumericalError as exc:
                raise NumericalError(f"t={t}: {exc}") from exc
        new = GaussianPolicy(tuple(steps))
        if policy is not None and _policy_delta(policy, new) < cfg.outer_tol:
            logger.debug("outer loop converged after %d sweeps", it + 1)
            return new
        policy = new
    return policy


def calibrate_beta(
    market: MarketModel,
    params: RewardParams,
    prior: PriorPolicy,
    benchmark,
    cashflow,
    x_ref,
    target_kl: float = 1.0,
    gamma: float = 1.0,
    bounds: tuple[float, float] = (1e-8, 1e8),
) -> float:
    """Pick ``beta`` so that ``KL(pi_0*(.|x_ref) || pi_0)`` hits ``target_kl`` nats.

    Root-finding runs on ``log beta``. If the target is out of reach inside
    ``bounds`` the nearest bound is returned.
    """

    def excess(log_beta):
        beta = float(np.exp(log_beta))
        try:
            pol = solve(market, params, prior, benchmark, cashflow, GlearnerConfig(beta=beta, gamma=gamma))
        except NumericalError:
            return np.inf
        return kl_to_prior(pol[0], prior, x_ref) - target_kl

    lo, hi = np.log(bounds[0]), np.log(bounds[1])
    f_lo, f_hi = excess(lo), excess(hi)
    if f_lo >= 0.0:
        return bounds[0]
    # shrink the upper end until the policy is proper
    while not np.isfinite(f_hi) and hi - lo > 1e-6:
        hi = 0.5 * (lo + hi)
        f_hi = excess(hi)
    if f_hi <= 0.0:
        return float(np.exp(hi))
    return float(np.exp(optimize.brentq(excess, lo, hi, xtol=1e-10, rtol=1e-10)))


def with_beta(cfg: GlearnerConfig, beta: float) -> GlearnerConfig:
    return replace(cfg, beta=beta)
