import csv

import numpy as np
import pytest

from alterego import backtest
from alterego.core import FundTrajectory
from alterego.errors import DataError
from alterego.glearner import GaussianPolicy, PolicyStep

from conftest import random_trajectory


def zero_policy(n, T):
    return GaussianPolicy(tuple(PolicyStep(np.zeros(n), np.zeros((n, n)), np.eye(n)) for _ in range(T + 1)))


def test_zero_policy_is_buy_and_hold(rng):
    n, T = 3, 5
    x0 = rng.uniform(0.1, 1.0, n)
    r = 0.05 * rng.standard_normal((T, n))
    ae = backtest.counterfactual_rollout(zero_policy(n, T), x0, r, np.zeros(T + 1), normalized=False)
    expected = x0 * np.vstack([np.ones(n), np.cumprod(1 + r, axis=0)])
    np.testing.assert_allclose(ae.holdings, expected, rtol=1e-14)
    np.testing.assert_array_equal(ae.trades, 0.0)


def test_zero_returns_keep_holdings_constant():
    x0 = np.array([0.5, 0.3, 0.2])
    ae = backtest.counterfactual_rollout(zero_policy(3, 4), x0, np.zeros((4, 3)), np.zeros(5))
    np.testing.assert_array_equal(ae.holdings, np.tile(x0, (5, 1)))


def test_replay_reproduces_the_manager(rng):
    for _ in range(5):
        pm, r = random_trajectory(rng, 4, 7)
        ae = backtest.counterfactual_rollout(backtest.replay_policy(pm), pm.holdings[0], r, pm.cashflow)
        np.testing.assert_allclose(ae.holdings, pm.holdings, rtol=0, atol=1e-15)
        np.testing.assert_array_equal(backtest.outperformance(ae, pm), np.zeros(8))


def test_replay_ignores_equal_policy_flows(rng):
    pm, r = random_trajectory(rng, 3, 4)
    ae = backtest.counterfactual_rollout(
        backtest.replay_policy(pm), pm.holdings[0], r, pm.cashflow, policy_cashflows=pm.cashflow
    )
    np.testing.assert_array_equal(backtest.outperformance(ae, pm), np.zeros(5))


def test_flow_difference_is_injected_pro_rata():
    x0 = np.array([0.75, 0.25])
    flows = np.array([0.1, 0.0, 0.0])
    ae = backtest.counterfactual_rollout(
        zero_policy(2, 2), x0, np.zeros((2, 2)), flows, policy_cashflows=np.zeros(3)
    )
    np.testing.assert_allclose(ae.trades[0], [0.075, 0.025])
    np.testing.assert_allclose(ae.holdings[1], [0.825, 0.275])


def test_extra_cash_in_flat_sector_hand_case():
    T = 4
    pm_x = np.tile([0.6, 0.4], (T + 1, 1))
    ae_x = pm_x.copy()
    ae_x[1:, 1] += 0.01
    pm = FundTrajectory("F", pm_x, np.zeros_like(pm_x), np.ones(T + 1), np.zeros(T + 1))
    ae = FundTrajectory("F", ae_x, np.zeros_like(ae_x), np.ones(T + 1), np.zeros(T + 1))
    np.testing.assert_allclose(backtest.outperformance(ae, pm), [0.0, 0.01, 0.01, 0.01, 0.01], atol=1e-15)


def test_outperformance_errors(rng):
    pm, _ = random_trajectory(rng, 2, 3)
    x = pm.holdings.copy()
    x[0, 0] += 1e-6
    shifted = FundTrajectory("F", x, pm.trades, pm.benchmark, pm.cashflow)
    with pytest.raises(DataError):
        backtest.outperformance(shifted, pm)
    short, _ = random_trajectory(rng, 2, 2)
    with pytest.raises(DataError):
        backtest.outperformance(short, pm)


def test_rollout_errors(rng):
    pol = zero_policy(2, 3)
    with pytest.raises(DataError):
        backtest.counterfactual_rollout(pol, np.ones(2), np.zeros((3, 3)), np.zeros(4))
    with pytest.raises(DataError):
        backtest.counterfactual_rollout(pol, np.ones(2), np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(DataError):
        backtest.counterfactual_rollout(pol, np.ones(2), np.zeros((5, 2)), np.zeros(6))
    with pytest.raises(DataError):
        backtest.counterfactual_rollout(pol, np.ones(3), np.zeros((3, 3)), np.zeros(4))


def test_group_average_of_identical_funds(rng):
    pm, r = random_trajectory(rng, 3, 5)
    ae = backtest.counterfactual_rollout(zero_policy(3, 5), pm.holdings[0], r, pm.cashflow)
    rep = backtest.evaluate("test", [pm, pm, pm], [ae, ae, ae])
    np.testing.assert_array_equal(rep.group_mean, rep.funds[0].outperformance)
    assert rep.funds[0].outperformance[0] == 0.0
    assert rep.final["F"] == rep.funds[0].final
    with pytest.raises(DataError):
        backtest.evaluate("test", [], [])


def test_report_files(rng, tmp_path):
    pms, aes = [], []
    for k in range(2):
        pm, r = random_trajectory(rng, 3, 4, f"F{k}")
        pms.append(pm)
        aes.append(backtest.counterfactual_rollout(zero_policy(3, 4), pm.holdings[0], r, pm.cashflow, fund_id=pm.fund_id))
    rep = backtest.evaluate("train", pms, aes)
    paths = backtest.report([rep], tmp_path)
    assert sorted(p.name for p in paths) == ["train_final.txt", "train_funds.csv", "train_group.csv"]
    with open(tmp_path / "train_funds.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["t", "fund_id", "pm_value", "ae_value", "outperformance", "outperformance_pct"]
    assert len(rows) == 10
    for row in rows:
        pm_v, ae_v = float(row["pm_value"]), float(row["ae_value"])
        assert float(row["outperformance"]) == ae_v - pm_v
        assert float(row["outperformance_pct"]) == pytest.approx(100 * (ae_v - pm_v) / pm_v)
    with open(tmp_path / "train_group.csv", newline="") as fh:
        group = list(csv.DictReader(fh))
    assert list(group[0]) == ["t", "mean", "F0", "F1"]
    np.testing.assert_allclose([float(g["mean"]) for g in group], rep.group_mean, rtol=1e-15)
    assert backtest.report([rep], None) == []


def test_report_plots(rng, tmp_path):
    pytest.importorskip("matplotlib")
    pm, r = random_trajectory(rng, 2, 3)
    ae = backtest.counterfactual_rollout(zero_policy(2, 3), pm.holdings[0], r, pm.cashflow)
    paths = backtest.report([backtest.evaluate("test", [pm], [ae])], tmp_path, plots=True)
    svg = tmp_path / "test_outperformance.svg"
    assert svg in paths and svg.read_text().lstrip().startswith("<?xml")
