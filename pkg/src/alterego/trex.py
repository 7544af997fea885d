"""Parametric T-REX: fit the four reward parameters from return-ranked trajectories.

Each trajectory's cumulative expected reward acts as a logit in a
Bradley-Terry model over every ordered pair of funds; the parameters
minimize the mean pairwise cross-entropy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats

from .core import MarketModel, RankedDemoSet, RewardParams, check_psd, expected_reward, require_normalized
from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass(frozen=True)
class TrexConfig:
    """Optimizer settings. ``reward_scale=None`` means ``1 / T``."""

    max_iters: int = 200
    learning_rate: float = 0.05
    reward_scale: float | None = None
    init_params: RewardParams = field(default_factory=lambda: RewardParams(0.5, 1.0, 0.1, 0.1))
    convergence_tol: float = 1e-6
    seed: int = 0
    drop_ties: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be positive")
        if self.reward_scale is not None and not self.reward_scale > 0.0:
            raise ValueError("reward_scale must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")

    def scale_for(self, horizon: int) -> float:
        if self.reward_scale is not None:
            return self.reward_scale
        return 1.0 / max(horizon, 1)


@dataclass(frozen=True)
class FitResult:
    params: RewardParams
    loss_history: np.ndarray
    param_history: tuple[RewardParams, ...]
    iterations: int


# Unconstrained coordinates: rho = logistic(a), eta = exp(b), lam = softplus(c), omega = softplus(d).


def _softplus_inv(y: float) -> float:
    # log(exp(y) - 1), stable for large y
    return float(y + np.log(-np.expm1(-y)))


def to_unconstrained(params: RewardParams) -> np.ndarray:
    rho = min(max(params.rho, 1e-12), 1.0 - 1e-12)
    lam = max(params.lam, 1e-300)
    omega = max(params.omega, 1e-300)
    return np.array([special.logit(rho), np.log(params.eta), _softplus_inv(lam), _softplus_inv(omega)])


def from_unconstrained(phi) -> RewardParams:
    a, b, c, d = (float(v) for v in phi)
    return RewardParams(
        rho=float(special.expit(a)),
        eta=float(np.exp(b)),
        lam=float(np.logaddexp(0.0, c)),
        omega=float(np.logaddexp(0.0, d)),
    )


def _jacobian_diag(phi) -> np.ndarray:
    """d(params)/d(phi), which is diagonal."""
    a, b, c, d = phi
    rho = special.expit(a)
    return np.array([rho * (1.0 - rho), np.exp(b), special.expit(c), special.expit(d)])


@dataclass(frozen=True)
class RewardFeatures:
    """Parameter-free per-step statistics of a stack of trajectories, shape ``(M, T+1)``.

    The reward is ``-(rho B + (1-rho) eta v - m)^2 - risk - lam flow - omega cost``.
    """

    bench: np.ndarray  # B_t
    value: np.ndarray  # 1'x_t
    mean_value: np.ndarray  # (1 + r_bar_t)'(x_t + u_t)
    risk: np.ndarray  # z' Sigma z
    flow: np.ndarray  # (1'u_t - C_t)^2
    cost: np.ndarray  # u_t'u_t

    @classmethod
    def from_demos(cls, trajectories, market: MarketModel) -> "RewardFeatures":
        if not trajectories:
            raise DataError("no trajectories")
        for tr in trajectories:
            require_normalized(tr)
            if tr.holdings.shape != market.mean_returns.shape:
                raise DataError(
                    f"fund {tr.fund_id}: shape {tr.holdings.shape} does not match "
                    f"market model {market.mean_returns.shape}"
                )
        x = np.stack([tr.holdings for tr in trajectories])
        u = np.stack([tr.trades for tr in trajectories])
        B = np.stack([tr.benchmark for tr in trajectories])
        C = np.stack([tr.cashflow for tr in trajectories])
        sigma = check_psd(market.covariance)
        z = x + u
        return cls(
            bench=B,
            value=x.sum(axis=2),
            mean_value=np.einsum("mtn,tn->mt", z, 1.0 + market.mean_returns),
            risk=np.einsum("mtn,nk,mtk->mt", z, sigma, z),
            flow=(u.sum(axis=2) - C) ** 2,
            cost=(u * u).sum(axis=2),
        )

    def step_rewards(self, params: RewardParams) -> np.ndarray:
        gap = params.rho * self.bench + (1.0 - params.rho) * params.eta * self.value - self.mean_value
        return -(gap * gap + self.risk) - params.lam * self.flow - params.omega * self.cost

    def cumulative(self, params: RewardParams) -> np.ndarray:
        return self.step_rewards(params).sum(axis=1)

    def cumulative_grad(self, params: RewardParams) -> np.ndarray:
        """d(cumulative reward)/d(rho, eta, lam, omega), shape ``(M, 4)``."""
        rho, eta = params.rho, params.eta
        gap = rho * self.bench + (1.0 - rho) * eta * self.value - self.mean_value
        d_rho = -2.0 * gap * (self.bench - eta * self.value)
        d_eta = -2.0 * gap * (1.0 - rho) * self.value
        return np.stack(
            [d_rho.sum(1), d_eta.sum(1), -self.flow.sum(1), -self.cost.sum(1)], axis=1
        )


def cumulative_reward(traj, params: RewardParams, market: MarketModel) -> float:
    """Sum of expected one-step rewards over ``t = 0..T``."""
    require_normalized(traj)
    if traj.holdings.shape != market.mean_returns.shape:
        raise DataError("trajectory and market model disagree on T or N")
    return float(
        sum(
            expected_reward(
                traj.holdings[t],
                traj.trades[t],
                params,
                market.mean_returns[t],
                market.covariance,
                traj.benchmark[t],
                traj.cashflow[t],
            )
            for t in range(traj.horizon + 1)
        )
    )


def ordered_pairs(scores, drop_ties: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays ``(lo, hi)`` over pairs with ``scores[lo] < scores[hi]``."""
    scores = np.asarray(scores, dtype=float)
    m = scores.shape[0]
    if m < 2:
        raise DataError("at least two trajectories are required")
    i, j = np.triu_indices(m, k=1)
    diff = scores[j] - scores[i]
    tied = np.abs(diff) < TIE_TOL
    if np.any(tied) and not drop_ties:
        raise DataError(f"{int(tied.sum())} tied score pair(s) and tie dropping is disabled")
    keep = ~tied
    i, j, diff = i[keep], j[keep], diff[keep]
    if i.size == 0:
        raise DataError("all score pairs are tied; ranking is degenerate")
    lo = np.where(diff > 0, i, j)
    hi = np.where(diff > 0, j, i)
    return lo, hi


def pair_loss_from_logits(logits, lo, hi) -> tuple[float, np.ndarray]:
    """Mean of ``-log softmax`` of the preferred member and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=float)
    margin = logits[lo] - logits[hi]
    loss = float(np.logaddexp(0.0, margin).mean())
    w = special.expit(margin) / lo.size
    grad = np.zeros_like(logits)
    np.add.at(grad, lo, w)
    np.add.at(grad, hi, -w)
    return loss, grad


def pairwise_loss(
    demos: RankedDemoSet,
    params: RewardParams,
    market: MarketModel,
    scale: float,
    drop_ties: bool = True,
) -> float:
    lo, hi = ordered_pairs(demos.scores, drop_ties)
    feats = RewardFeatures.from_demos(demos.trajectories, market)
    loss, _ = pair_loss_from_logits(scale * feats.cumulative(params), lo, hi)
    return loss


class PairwiseObjective:
    """Loss and gradient in unconstrained coordinates for a fixed demo set."""

    def __init__(self, demos: RankedDemoSet, market: MarketModel, scale: float, drop_ties: bool = True):
        self.lo, self.hi = ordered_pairs(demos.scores, drop_ties)
        self.features = RewardFeatures.from_demos(demos.trajectories, market)
        self.scale = scale

    def loss(self, phi) -> float:
        # a trial step can overflow exp(b); report it as an unusable point
        with np.errstate(over="ignore"):
            try:
                params = from_unconstrained(phi)
            except ValueError:
                return float("inf")
            logits = self.scale * self.features.cumulative(params)
        if not np.all(np.isfinite(logits)):
            return float("inf")
        loss, _ = pair_loss_from_logits(logits, self.lo, self.hi)
        return loss

    def loss_and_grad(self, phi) -> tuple[float, np.ndarray]:
        phi = np.asarray(phi, dtype=float)
        params = from_unconstrained(phi)
        logits = self.scale * self.features.cumulative(params)
        loss, dlogits = pair_loss_from_logits(logits, self.lo, self.hi)
        dparams = self.scale * dlogits @ self.features.cumulative_grad(params)
        return loss, dparams * _jacobian_diag(phi)


def fit_reward(demos: RankedDemoSet, market: MarketModel, cfg: TrexConfig | None = None) -> FitResult:
    """Gradient descent on the pairwise loss with halve-on-increase step control.

    A step that would raise the loss is rejected and the learning rate halved,
    so the recorded loss history never increases.
    """
    cfg = cfg or TrexConfig()
    scale = cfg.scale_for(demos.horizon)
    obj = PairwiseObjective(demos, market, scale, cfg.drop_ties)
    phi = to_unconstrained(cfg.init_params)
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grad = obj.loss_and_grad(phi)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NumericalError(
            f"non-finite loss at initialization (scale={scale}); reduce reward_scale"
        )
    lr = cfg.learning_rate
    losses = [loss]
    history = [from_unconstrained(phi)]
    it = 0
    for it in range(1, cfg.max_iters + 1):
        accepted = False
        while lr > 1e-14:
            cand = phi - lr * grad
            cand_loss = obj.loss(cand)
            if np.isfinite(cand_loss) and cand_loss <= loss:
                accepted = True
                break
            lr *= 0.5
        if not accepted:
            logger.debug("step size underflow at iteration %d", it)
            it -= 1
            break
        phi = cand
        prev, loss = loss, cand_loss
        grad = obj.loss_and_grad(phi)[1]
        losses.append(loss)
        history.append(from_unconstrained(phi))
        if prev - loss < cfg.convergence_tol:
            break
    return FitResult(
        params=history[-1],
        loss_history=np.array(losses),
        param_history=tuple(history),
        iterations=it,
    )


def ranking_metrics_from_rewards(scores, rewards, drop_ties: bool = True) -> dict[str, float]:
    """Pairwise accuracy plus Pearson and Spearman correlation of scores vs. rewards."""
    scores = np.asarray(scores, dtype=float)
    rewards = np.asarray(rewards, dtype=float)
    lo, hi = ordered_pairs(scores, drop_ties)
    accuracy = float(np.mean(rewards[hi] > rewards[lo]))
    with np.errstate(invalid="ignore", divide="ignore"):
        pearson = float(np.corrcoef(scores, rewards)[0, 1])
        spearman = float(stats.spearmanr(scores, rewards).statistic)
    return {"accuracy": accuracy, "pearson": pearson, "spearman": spearman}


def ranking_metrics(demos: RankedDemoSet, params: RewardParams, market: MarketModel) -> dict[str, float]:
    feats = RewardFeatures.from_demos(demos.trajectories, market)
    return ranking_metrics_from_rewards(demos.scores, feats.cumulative(params))
