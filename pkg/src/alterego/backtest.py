"""Counterfactual rollouts of a learned policy against the managers' actual trajectories."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import FundTrajectory, propagate_state
from .errors import DataError
from .glearner import GaussianPolicy, PolicyStep, recommend
from .io import atomic_write_text, fmt, write_csv

logger = logging.getLogger(__name__)

INITIAL_TOL = 1e-9


def replay_policy(traj: FundTrajectory) -> GaussianPolicy:
    """Degenerate policy whose mode is the manager's own trade at every step."""
    n = traj.n_sectors
    return GaussianPolicy(
        tuple(PolicyStep(traj.trades[t], np.zeros((n, n)), np.eye(n)) for t in range(traj.horizon + 1))
    )


def counterfactual_rollout(
    policy: GaussianPolicy,
    x0,
    realized_returns,
    cashflows,
    benchmark=None,
    fund_id: str = "AE",
    dates=None,
    policy_cashflows=None,
    normalized: bool = True,
) -> FundTrajectory:
    """Follow the policy mode on realized returns from ``x0``.

    ``cashflows`` are the manager's flows and are recorded on the result.
    When ``policy_cashflows`` (the flows the policy was solved for) is given,
    the difference ``C_t - policy_C_t`` is added as cash before trading,
    spread pro rata over current holdings.
    """
    x0 = np.asarray(x0, dtype=float)
    r = np.asarray(realized_returns, dtype=float)
    c = np.asarray(cashflows, dtype=float)
    n = x0.shape[0]
    T = r.shape[0]
    if r.ndim != 2 or r.shape[1] != n:
        raise DataError(f"realized returns must be T x {n}, got {r.shape}")
    if c.shape != (T + 1,):
        raise DataError(f"cashflows must have {T + 1} entries, got {c.shape}")
    if policy.horizon < T:
        raise DataError(f"policy covers {policy.horizon} steps, rollout needs {T}")
    if policy[0].intercept.shape != (n,):
        raise DataError("policy and holdings disagree on the number of sectors")
    extra = np.zeros(T + 1)
    if policy_cashflows is not None:
        pc = np.asarray(policy_cashflows, dtype=float)
        if pc.shape[0] < T + 1:
            raise DataError("policy_cashflows shorter than the rollout")
        extra = c - pc[: T + 1]
    bench = np.ones(T + 1) if benchmark is None else np.asarray(benchmark, dtype=float)
    x = np.empty((T + 1, n))
    u = np.empty((T + 1, n))
    x[0] = x0
    for t in range(T + 1):
        u[t] = recommend(policy[t], x[t])
        if extra[t]:
            value = x[t].sum()
            if value > 0.0:
                u[t] = u[t] + extra[t] * x[t] / value
        if t < T:
            x[t + 1] = propagate_state(x[t], u[t], r[t])
    return FundTrajectory(
        fund_id=fund_id,
        holdings=x,
        trades=u,
        benchmark=bench,
        cashflow=c,
        normalized=normalized,
        dates=dates,
    )


def outperformance(ae: FundTrajectory, pm: FundTrajectory) -> np.ndarray:
    """AE minus PM total portfolio value at every step."""
    if ae.holdings.shape != pm.holdings.shape:
        raise DataError(f"AE shape {ae.holdings.shape} differs from PM shape {pm.holdings.shape}")
    gap = np.max(np.abs(ae.holdings[0] - pm.holdings[0]))
    if gap > INITIAL_TOL:
        raise DataError(f"fund {pm.fund_id}: AE and PM initial holdings differ by {gap:.3e}")
    return ae.values() - pm.values()


@dataclass(frozen=True)
class FundBacktest:
    fund_id: str
    pm: FundTrajectory
    ae: FundTrajectory
    outperformance: np.ndarray

    @property
    def final(self) -> float:
        return float(self.outperformance[-1])

    @property
    def outperformance_pct(self) -> np.ndarray:
        return 100.0 * self.outperformance / self.pm.values()


@dataclass(frozen=True)
class BacktestReport:
    """Per-fund AE/PM comparisons for one window plus the group-average curve."""

    window: str
    funds: tuple[FundBacktest, ...]

    @property
    def group_mean(self) -> np.ndarray:
        return np.mean([f.outperformance for f in self.funds], axis=0)

    @property
    def final(self) -> dict[str, float]:
        return {f.fund_id: f.final for f in self.funds}


def evaluate(window: str, pms, aes) -> BacktestReport:
    funds = tuple(
        FundBacktest(pm.fund_id, pm, ae, outperformance(ae, pm)) for pm, ae in zip(pms, aes)
    )
    if not funds:
        raise DataError("no funds to evaluate")
    return BacktestReport(window, funds)


def _plot(path: Path, report: BacktestReport) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 4))
    for f in report.funds:
        axes[0].plot(f.outperformance, label=f.fund_id)
    axes[0].axhline(0.0, color="0.5", lw=0.8)
    axes[0].set_title(f"{report.window}: AE - PM by fund")
    axes[0].set_xlabel("month")
    axes[0].legend(fontsize="small")
    axes[1].plot(report.group_mean, color="k")
    axes[1].axhline(0.0, color="0.5", lw=0.8)
    axes[1].set_title(f"{report.window}: group average")
    axes[1].set_xlabel("month")
    fig.tight_layout()
    tmp = path.with_name(f".{path.name}.tmp")
    fig.savefig(tmp, format="svg", metadata={"Date": None})
    plt.close(fig)
    tmp.replace(path)


def report(reports, out_dir=None, plots: bool = False) -> list[Path]:
    """Write ``<window>_funds.csv`` and ``<window>_group.csv`` per report, plus SVGs if asked."""
    if out_dir is None:
        return []
    out_dir = Path(out_dir)
    written = []
    for rep in reports:
        rows = []
        for f in rep.funds:
            pm_v, ae_v, pct = f.pm.values(), f.ae.values(), f.outperformance_pct
            for t in range(pm_v.shape[0]):
                rows.append([str(t), f.fund_id, fmt(pm_v[t]), fmt(ae_v[t]), fmt(f.outperformance[t]), fmt(pct[t])])
        path = out_dir / f"{rep.window}_funds.csv"
        write_csv(path, ["t", "fund_id", "pm_value", "ae_value", "outperformance", "outperformance_pct"], rows)
        written.append(path)

        ids = [f.fund_id for f in rep.funds]
        mean = rep.group_mean
        grows = [
            [str(t), fmt(mean[t]), *(fmt(f.outperformance[t]) for f in rep.funds)]
            for t in range(mean.shape[0])
        ]
        path = out_dir / f"{rep.window}_group.csv"
        write_csv(path, ["t", "mean", *ids], grows)
        written.append(path)

        summary = "".join(f"{f.fund_id} = {fmt(f.final)}\n" for f in rep.funds)
        path = out_dir / f"{rep.window}_final.txt"
        atomic_write_text(path, f"group_mean = {fmt(mean[-1])}\n" + summary)
        written.append(path)

        if plots:
            path = out_dir / f"{rep.window}_outperformance.svg"
            _plot(path, rep)
            written.append(path)
    return written
