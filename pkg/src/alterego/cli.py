"""Batch entry point: generate, irl, rl, backtest and the end-to-end pipeline.

Output tree under ``--out-dir``::

    data/      holdings.csv cashflows.csv benchmark.csv sector_returns.csv
    irl/       fit.txt trace.csv
    rl/        policy_train.txt policy_test.txt
    backtest/  {train,test}_funds.csv {train,test}_group.csv {train,test}_final.txt
    config.txt the effective configuration

Exit codes: 0 success, 1 configuration, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import backtest, config, glearner, io, market, simgen, trex
from .core import FundTrajectory, MarketModel, RankedDemoSet, RewardParams
from .errors import AlterEgoError, ConfigError, DataError

logger = logging.getLogger("alterego")


# data


def sim_config(cfg: config.PipelineConfig) -> simgen.SimConfig:
    s = cfg.sim
    return simgen.SimConfig(
        n_sectors=s.n_sectors,
        horizon=s.horizon,
        n_funds=s.n_funds,
        planted=RewardParams(s.rho, s.eta, s.lam, s.omega),
        skill_levels=s.skill_levels or None,
        trade_noise=s.trade_noise,
        return_cov=simgen.default_return_cov(s.n_sectors, s.return_vol, s.return_corr),
        cashflow_scale=s.cashflow_scale,
        weight_dispersion=s.weight_dispersion,
        start_date=s.start_date,
        seed=s.seed,
    )


def cmd_generate(cfg: config.PipelineConfig, out_dir) -> Path:
    """Simulate the synthetic fund group and write it in the ingest format."""
    try:
        scfg = sim_config(cfg)
    except ValueError as exc:
        raise ConfigError(f"sim: {exc}") from None
    path = simgen.generate_market_path(scfg)
    demos = simgen.generate_funds(scfg, path)
    data = Path(out_dir) / "data"
    trajs = list(demos.trajectories)
    io.write_trajectories(data / "holdings.csv", trajs)
    io.write_cashflows(data / "cashflows.csv", trajs)
    io.write_series(data / "benchmark.csv", path.dates, path.benchmark)
    # returns realized over month t are stamped with month t
    io.write_sector_returns(data / "sector_returns.csv", path.dates[:-1], path.returns)
    logger.info("generated %d funds over %d months in %s", len(trajs), scfg.horizon, data)
    return data


@dataclass(frozen=True)
class Dataset:
    trajectories: tuple[FundTrajectory, ...]  # raw currency units
    sector_returns: np.ndarray  # one row per month transition
    dates: tuple[str, ...]


def _data_paths(cfg: config.PipelineConfig, out_dir):
    p = cfg.paths
    if p.holdings:
        return Path(p.holdings), Path(p.cashflows), Path(p.benchmark), Path(p.sector_returns) if p.sector_returns else None
    data = Path(out_dir) / "data"
    ret = data / "sector_returns.csv"
    return data / "holdings.csv", data / "cashflows.csv", data / "benchmark.csv", ret if ret.is_file() else None


def _aliases(path: str) -> dict[str, str]:
    if not path:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    return io.parse_kv(text, path)


def load_dataset(cfg: config.PipelineConfig, out_dir) -> Dataset:
    hold, flows, bench, rets = _data_paths(cfg, out_dir)
    trajs = io.read_trajectories(hold, flows, bench, _aliases(cfg.paths.aliases))
    dates = trajs[0].dates
    n = trajs[0].n_sectors
    if any(tr.n_sectors != n for tr in trajs):
        raise DataError(f"{hold}: funds disagree on the number of sectors")
    if rets is not None:
        rdates, r = io.read_sector_returns(rets)
        if r.shape[1] != n:
            raise DataError(f"{rets}: {r.shape[1]} sectors, holdings have {n}")
        index = {d: i for i, d in enumerate(rdates)}
        missing = [d for d in dates[:-1] if d not in index]
        if missing:
            raise DataError(f"{rets}: no returns for months {missing[:3]}")
        r = np.array([r[index[d]] for d in dates[:-1]])
    else:
        r = market.implied_sector_returns(trajs)
        if not np.all(np.isfinite(r)):
            raise DataError("implied sector returns are not finite; supply paths.sector_returns")
    return Dataset(tuple(trajs), r, dates)


@dataclass(frozen=True)
class Window:
    start: int
    stop: int  # inclusive row index

    @property
    def horizon(self) -> int:
        return self.stop - self.start


def split_windows(cfg: config.PipelineConfig, dates) -> tuple[Window, Window]:
    """Train and test windows; they share the boundary month."""
    s = cfg.split
    index = {d: i for i, d in enumerate(dates)}

    def find(d, default):
        if not d:
            return default
        if d not in index:
            raise ConfigError(f"split date {d} is outside the data ({dates[0]}..{dates[-1]})")
        return index[d]

    a = find(s.train_start, 0)
    b = find(s.split, a + s.train_months)
    c = find(s.test_end, len(dates) - 1)
    if not a < b < c or c >= len(dates):
        raise ConfigError(
            f"need train_start < split < test_end inside {len(dates)} months, got rows {a}, {b}, {c}"
        )
    return Window(a, b), Window(b, c)


def window_demos(data: Dataset, w: Window) -> tuple[FundTrajectory, ...]:
    out = []
    for tr in data.trajectories:
        sub = tr.window(w.start, w.stop)
        out.append(market.normalize(sub, sub.benchmark))
    return tuple(out)


# stages


def _trex_config(cfg: config.PipelineConfig) -> trex.TrexConfig:
    t = cfg.trex
    return trex.TrexConfig(
        max_iters=t.max_iters,
        learning_rate=t.learning_rate,
        reward_scale=t.reward_scale or None,
        init_params=RewardParams(t.init_rho, t.init_eta, t.init_lam, t.init_omega),
        convergence_tol=t.convergence_tol,
        seed=t.seed,
        drop_ties=t.drop_ties,
    )


def _arma_spec(cfg: config.PipelineConfig) -> market.ArmaSpec:
    return market.ArmaSpec(p=cfg.arma.p, q=cfg.arma.q)


@dataclass(frozen=True)
class Prepared:
    data: Dataset
    train: Window
    test: Window
    train_demos: RankedDemoSet
    test_trajs: tuple[FundTrajectory, ...]
    train_market: MarketModel
    arma: market.ArmaSpec


def prepare(cfg: config.PipelineConfig, out_dir) -> Prepared:
    data = load_dataset(cfg, out_dir)
    train, test = split_windows(cfg, data.dates)
    train_market, fitted = market.build_market_model(
        data.sector_returns[train.start : train.stop], _arma_spec(cfg), cfg.arma.shrinkage
    )
    return Prepared(
        data=data,
        train=train,
        test=test,
        train_demos=RankedDemoSet.from_trajectories(window_demos(data, train)),
        test_trajs=window_demos(data, test),
        train_market=train_market,
        arma=fitted,
    )


def cmd_irl(cfg: config.PipelineConfig, out_dir, prep: Prepared | None = None) -> trex.FitResult:
    prep = prep or prepare(cfg, out_dir)
    tcfg = _trex_config(cfg)
    fit = trex.fit_reward(prep.train_demos, prep.train_market, tcfg)
    metrics = trex.ranking_metrics(prep.train_demos, fit.params, prep.train_market)
    scale = tcfg.scale_for(prep.train_demos.horizon)
    out = Path(out_dir) / "irl"
    io.atomic_write_text(out / "fit.txt", io.fit_result_text(fit, metrics, scale))
    io.write_csv(out / "trace.csv", io.FIT_TRACE_HEADER, io.fit_trace_rows(fit))
    logger.info(
        "T-REX: rho=%.4f eta=%.4f lam=%.4f omega=%.4f accuracy=%.3f after %d iterations",
        fit.params.rho, fit.params.eta, fit.params.lam, fit.params.omega, metrics["accuracy"], fit.iterations,
    )
    return fit


def group_paths(trajs) -> tuple[np.ndarray, np.ndarray]:
    """Group-average benchmark and cashflow paths used to solve one policy per group."""
    bench = np.mean([tr.benchmark for tr in trajs], axis=0)
    flows = np.mean([tr.cashflow for tr in trajs], axis=0)
    return bench, flows


MAX_BETA = 1e8


@dataclass(frozen=True)
class Policies:
    train: glearner.GaussianPolicy
    test: glearner.GaussianPolicy
    beta: float
    train_cashflow: np.ndarray
    test_cashflow: np.ndarray


def cmd_rl(cfg: config.PipelineConfig, out_dir, params: RewardParams | None = None, prep: Prepared | None = None) -> Policies:
    prep = prep or prepare(cfg, out_dir)
    if params is None:
        params = io.read_fit_params(Path(out_dir) / "irl" / "fit.txt")
    demos = prep.train_demos.trajectories
    prior = market.fit_prior(
        np.vstack([tr.trades for tr in demos]), full_covariance=cfg.glearner.full_prior_covariance
    )
    g = cfg.glearner
    bench, flows = group_paths(demos)
    beta = g.beta
    if beta == 0.0:
        x_ref = np.mean([tr.holdings[0] for tr in demos], axis=0)
        beta = glearner.calibrate_beta(
            prep.train_market, params, prior, bench, flows, x_ref, target_kl=g.target_kl, gamma=g.gamma
        )
        logger.info("calibrated beta = %.6g for KL %.3g nats at t=0", beta, g.target_kl)
    gcfg = glearner.GlearnerConfig(beta=beta, gamma=g.gamma, max_outer_iters=g.max_outer_iters, outer_tol=g.outer_tol)
    train_policy = glearner.solve(prep.train_market, params, prior, bench, flows, gcfg)
    if g.enforce_floor:
        # raise beta a decade at a time until no alter ego trails the best manager in-sample
        while True:
            ae, pm = in_sample_rewards(prep, params, train_policy, flows)
            if ae.min() >= pm.max() or beta >= MAX_BETA:
                break
            beta = min(10.0 * beta, MAX_BETA)
            gcfg = glearner.with_beta(gcfg, beta)
            train_policy = glearner.solve(prep.train_market, params, prior, bench, flows, gcfg)
            logger.info("in-sample floor not met; beta raised to %.6g", beta)
        if ae.min() < pm.max():
            logger.warning("in-sample floor not met at beta=%.3g", beta)

    test_market = market.forecast_market_model(prep.arma, prep.test.horizon, cfg.arma.shrinkage)
    tbench, tflows = group_paths(prep.test_trajs)
    test_policy = glearner.solve(test_market, params, prior, tbench, tflows, gcfg)

    out = Path(out_dir) / "rl"
    header = [("beta", io.fmt(beta)), ("gamma", io.fmt(g.gamma))]
    io.atomic_write_text(
        out / "policy_train.txt",
        io.policy_text(train_policy, header + [("cashflow", " ".join(map(io.fmt, flows)))]),
    )
    io.atomic_write_text(
        out / "policy_test.txt",
        io.policy_text(test_policy, header + [("cashflow", " ".join(map(io.fmt, tflows)))]),
    )
    return Policies(train_policy, test_policy, beta, flows, tflows)



def in_sample_rewards(prep: Prepared, params: RewardParams, policy, flows) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative fitted reward of each fund's alter ego and of the fund itself on the train window."""
    trajs = prep.train_demos.trajectories
    r = prep.data.sector_returns[prep.train.start : prep.train.stop]
    aes = rollouts(trajs, r, policy, flows)
    ae = np.array([trex.cumulative_reward(a, params, prep.train_market) for a in aes])
    pm = np.array([trex.cumulative_reward(t, params, prep.train_market) for t in trajs])
    return ae, pm


def _load_policy(path) -> tuple[glearner.GaussianPolicy, np.ndarray]:
    policy, extra = io.read_policy(path)
    try:
        flows = np.array([float(v) for v in extra["cashflow"].split()])
    except (KeyError, ValueError):
        raise DataError(f"{path}: missing or malformed cashflow line") from None
    return policy, flows


def rollouts(trajs, returns, policy, policy_flows):
    if policy is None:
        return [
            backtest.counterfactual_rollout(
                backtest.replay_policy(tr),
                tr.holdings[0],
                returns,
                tr.cashflow,
                tr.benchmark,
                tr.fund_id,
                tr.dates,
                normalized=tr.normalized,
            )
            for tr in trajs
        ]
    return [
        backtest.counterfactual_rollout(
            policy, tr.holdings[0], returns, tr.cashflow, tr.benchmark, tr.fund_id, tr.dates, policy_flows
        )
        for tr in trajs
    ]


def cmd_backtest(
    cfg: config.PipelineConfig,
    out_dir,
    policies: Policies | None = None,
    prep: Prepared | None = None,
    plots: bool = False,
    replay: bool = False,
) -> list[backtest.BacktestReport]:
    prep = prep or prepare(cfg, out_dir)
    if replay:
        pol = {"train": (None, None), "test": (None, None)}
    elif policies is not None:
        pol = {
            "train": (policies.train, policies.train_cashflow),
            "test": (policies.test, policies.test_cashflow),
        }
    else:
        rl = Path(out_dir) / "rl"
        pol = {"train": _load_policy(rl / "policy_train.txt"), "test": _load_policy(rl / "policy_test.txt")}
    r = prep.data.sector_returns
    reports = []
    for name, w, trajs in (
        ("train", prep.train, prep.train_demos.trajectories),
        ("test", prep.test, prep.test_trajs),
    ):
        policy, flows = pol[name]
        if policy is None:
            # replay in the data's own units so the copy is bit-exact, then normalize like the manager
            raw = [tr.window(w.start, w.stop) for tr in prep.data.trajectories]
            aes = [market.normalize(a, a.benchmark) for a in rollouts(raw, r[w.start : w.stop], None, None)]
        else:
            aes = rollouts(trajs, r[w.start : w.stop], policy, flows)
        reports.append(backtest.evaluate(name, trajs, aes))
    backtest.report(reports, Path(out_dir) / "backtest", plots=plots)
    for rep in reports:
        logger.info("%s: mean final outperformance %.6f", rep.window, rep.group_mean[-1])
    return reports


def cmd_pipeline(cfg: config.PipelineConfig, out_dir, plots: bool = False):
    out_dir = Path(out_dir)
    io.atomic_write_text(out_dir / "config.txt", config.emit(cfg))
    if not cfg.paths.holdings:
        cmd_generate(cfg, out_dir)
    prep = prepare(cfg, out_dir)
    fit = cmd_irl(cfg, out_dir, prep)
    policies = cmd_rl(cfg, out_dir, fit.params, prep)
    reports = cmd_backtest(cfg, out_dir, policies, prep, plots=plots)
    return fit, policies, reports


# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="alterego", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("generate", "write the synthetic fund fixture"),
        ("irl", "fit reward parameters from ranked trajectories"),
        ("rl", "solve train and test policies from a fit"),
        ("backtest", "roll policies forward and compare with the managers"),
        ("pipeline", "generate or ingest, then irl, rl and backtest"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", type=Path, help="flat section.key = value file")
        p.add_argument("--out-dir", type=Path, default=Path("out"))
        p.add_argument("--seed", type=int, help="overrides sim.seed and trex.seed")
        p.add_argument("--plots", action="store_true", help="also write SVG plots")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "backtest":
            p.add_argument("--replay", action="store_true", help="replay the managers' own trades")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = config.load(args.config) if args.config else config.PipelineConfig()
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        out = args.out_dir
        if args.command == "generate":
            cmd_generate(cfg, out)
        elif args.command == "irl":
            cmd_irl(cfg, out)
        elif args.command == "rl":
            cmd_rl(cfg, out)
        elif args.command == "backtest":
            cmd_backtest(cfg, out, plots=args.plots, replay=args.replay)
        else:
            cmd_pipeline(cfg, out, plots=args.plots)
    except AlterEgoError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return DataError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
