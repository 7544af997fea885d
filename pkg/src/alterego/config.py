"""Pipeline configuration as flat ``section.key = value`` text.

Every field has a default, so an empty file is a valid configuration.
``emit`` writes every key, and ``parse(emit(cfg)) == cfg`` holds exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .core import RewardParams
from .errors import ConfigError
from .io import fmt, parse_kv, parse_month


@dataclass(frozen=True)
class PathsSection:
    # empty holdings means: generate the synthetic fixture into <out_dir>/data
    holdings: str = ""
    cashflows: str = ""
    benchmark: str = ""
    sector_returns: str = ""
    aliases: str = ""


@dataclass(frozen=True)
class SplitSection:
    """Window boundaries as YYYY-MM; empty means first month, first + train_months, last month."""

    train_start: str = ""
    split: str = ""
    test_end: str = ""
    train_months: int = 24


@dataclass(frozen=True)
class SimSection:
    n_sectors: int = 11
    horizon: int = 36
    n_funds: int = 6
    rho: float = 0.9
    eta: float = 2.0
    lam: float = 0.1
    omega: float = 0.1
    skill_levels: tuple[float, ...] = ()
    trade_noise: float = 0.001
    return_vol: float = 0.18
    return_corr: float = 0.6
    cashflow_scale: float = 0.002
    weight_dispersion: float = 0.1
    start_date: str = "2017-01"
    seed: int = 0


@dataclass(frozen=True)
class TrexSection:
    max_iters: int = 200
    learning_rate: float = 0.05
    reward_scale: float = 0.0  # 0 means 1 / T
    init_rho: float = 0.5
    init_eta: float = 1.0
    init_lam: float = 0.1
    init_omega: float = 0.1
    convergence_tol: float = 1e-6
    seed: int = 0
    drop_ties: bool = True


@dataclass(frozen=True)
class GlearnerSection:
    beta: float = 0.0  # 0 means calibrate to target_kl
    target_kl: float = 1.0
    gamma: float = 1.0
    max_outer_iters: int = 1
    outer_tol: float = 1e-8
    full_prior_covariance: bool = False
    enforce_floor: bool = True


@dataclass(frozen=True)
class ArmaSection:
    p: int = 1
    q: int = 1
    shrinkage: float = 0.0


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsSection = field(default_factory=PathsSection)
    split: SplitSection = field(default_factory=SplitSection)
    sim: SimSection = field(default_factory=SimSection)
    trex: TrexSection = field(default_factory=TrexSection)
    glearner: GlearnerSection = field(default_factory=GlearnerSection)
    arma: ArmaSection = field(default_factory=ArmaSection)

    def __post_init__(self):
        validate(self)

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(
            self,
            sim=dataclasses.replace(self.sim, seed=seed),
            trex=dataclasses.replace(self.trex, seed=seed),
        )


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return fmt(v)
    if isinstance(v, tuple):
        return " ".join(fmt(x) for x in v)
    return str(v)


def _parse_value(text: str, kind, key: str, source):
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {text!r}")
            return low == "true"
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == tuple[float, ...]:
            return tuple(float(x) for x in text.replace(",", " ").split())
        return text
    except ValueError as exc:
        raise ConfigError(f"{source}: bad value for {key}: {exc}") from None


_SECTIONS = {f.name: f.default_factory for f in fields(PipelineConfig)}


def _field_types(section_cls) -> dict[str, object]:
    hints = {"int": int, "float": float, "bool": bool, "str": str, "tuple[float, ...]": tuple[float, ...]}
    return {f.name: hints[f.type] for f in fields(section_cls)}


def emit(cfg: PipelineConfig) -> str:
    lines = []
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        for f in fields(sec):
            lines.append(f"{name}.{f.name} = {_emit_value(getattr(sec, f.name))}\n")
    return "".join(lines)


def parse(text: str, source="<config>") -> PipelineConfig:
    kv = parse_kv(text, source)
    values: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for key, raw in kv.items():
        name, dot, attr = key.partition(".")
        if not dot or name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown key {key!r}")
        types = _field_types(type(_SECTIONS[name]()))
        if attr not in types:
            raise ConfigError(f"{source}: unknown key {key!r}")
        values[name][attr] = _parse_value(raw, types[attr], key, source)
    try:
        return PipelineConfig(**{name: type(_SECTIONS[name]())(**v) for name, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: config file not found")
    cfg = parse(path.read_text(encoding="utf-8"), path)
    base = path.parent
    # relative data paths are taken relative to the config file
    resolved = {
        f.name: str(base / getattr(cfg.paths, f.name))
        for f in fields(cfg.paths)
        if getattr(cfg.paths, f.name) and not Path(getattr(cfg.paths, f.name)).is_absolute()
    }
    cfg = dataclasses.replace(cfg, paths=dataclasses.replace(cfg.paths, **resolved))
    for f in fields(cfg.paths):
        p = getattr(cfg.paths, f.name)
        if p and not Path(p).is_file():
            raise ConfigError(f"{path}: paths.{f.name} points to missing file {p}")
    return cfg


def _month_index(text: str) -> int:
    y, m = parse_month(text, "<config>")
    return 12 * y + m - 1


def validate(cfg: PipelineConfig) -> None:
    p = cfg.paths
    given = [bool(p.holdings), bool(p.cashflows), bool(p.benchmark)]
    if any(given) and not all(given):
        raise ConfigError("paths.holdings, paths.cashflows and paths.benchmark must be set together")
    s = cfg.split
    try:
        months = [_month_index(d) for d in (s.train_start, s.split, s.test_end) if d]
    except Exception as exc:
        raise ConfigError(f"split: {exc}") from None
    if months != sorted(months) or len(set(months)) != len(months):
        raise ConfigError("split dates must satisfy train_start < split < test_end")
    if s.train_months < 1:
        raise ConfigError("split.train_months must be positive")
    t = cfg.trex
    if t.max_iters < 1 or not t.learning_rate > 0 or t.convergence_tol < 0:
        raise ConfigError("trex.max_iters >= 1, learning_rate > 0 and convergence_tol >= 0 are required")
    try:
        RewardParams(t.init_rho, t.init_eta, t.init_lam, t.init_omega)
        RewardParams(cfg.sim.rho, cfg.sim.eta, cfg.sim.lam, cfg.sim.omega)
    except ValueError as exc:
        raise ConfigError(f"reward parameters: {exc}") from None
    sim = cfg.sim
    if min(sim.n_sectors, sim.horizon, sim.n_funds) < 1:
        raise ConfigError("sim.n_sectors, sim.horizon and sim.n_funds must be positive")
    if min(sim.trade_noise, sim.cashflow_scale, sim.weight_dispersion, sim.return_vol) < 0:
        raise ConfigError("sim noise, flow, dispersion and volatility scales must be non-negative")
    if cfg.arma.p < 0 or cfg.arma.q < 0 or cfg.glearner.max_outer_iters < 1:
        raise ConfigError("arma orders must be >= 0 and glearner.max_outer_iters >= 1")
    if t.reward_scale < 0:
        raise ConfigError("trex.reward_scale must be positive, or 0 for 1/T")
    if cfg.glearner.beta < 0 or cfg.glearner.target_kl <= 0:
        raise ConfigError("glearner.beta must be >= 0 and target_kl > 0")
    if not 0.0 < cfg.glearner.gamma <= 1.0:
        raise ConfigError("glearner.gamma must lie in (0, 1]")
    if not 0.0 <= cfg.arma.shrinkage <= 1.0:
        raise ConfigError("arma.shrinkage must lie in [0, 1]")
    if cfg.sim.skill_levels and len(cfg.sim.skill_levels) != cfg.sim.n_funds:
        raise ConfigError("sim.skill_levels needs one value per fund")
