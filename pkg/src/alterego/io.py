"""File formats: trajectory, cashflow, benchmark and sector-return CSVs, key-value text files.

Floats are written with ``repr`` so a parse/emit cycle is exact and output
bytes depend only on the values.
"""

from __future__ import annotations

import csv
import io
import os
import tempfile
from pathlib import Path

import numpy as np

from .core import FundTrajectory, RewardParams
from .errors import ConfigError, DataError
from .glearner import GaussianPolicy, PolicyStep
from .trex import FitResult


def fmt(value) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(value))


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_csv(path, header, rows) -> None:
    atomic_write_text(path, _csv_text(header, rows))


def _read_rows(path) -> tuple[list[str], list[tuple[int, list[str]]]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [(reader.line_num, row) for row in reader if row]
    return [h.strip() for h in header], rows


def _float(text: str, path, line: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}:{line}: not a number: {text!r}") from None
    if not np.isfinite(v):
        raise DataError(f"{path}:{line}: non-finite value {text!r}")
    return v


def sector_columns(n: int) -> list[str]:
    return [f"s{k + 1:02d}" for k in range(n)]


def parse_month(text: str, path="<input>", line: int = 0) -> tuple[int, int]:
    parts = text.split("-")
    if len(parts) != 2 or len(parts[0]) != 4 or len(parts[1]) != 2:
        raise DataError(f"{path}:{line}: date {text!r} is not YYYY-MM")
    try:
        year, month = int(parts[0]), int(parts[1])
    except ValueError:
        raise DataError(f"{path}:{line}: date {text!r} is not YYYY-MM") from None
    if not 1 <= month <= 12:
        raise DataError(f"{path}:{line}: month out of range in {text!r}")
    return year, month


def check_consecutive(dates, path="<input>") -> None:
    """Raise unless ``dates`` are strictly consecutive months."""
    prev = None
    for d in dates:
        y, m = parse_month(d, path)
        idx = 12 * y + m - 1
        if prev is not None and idx != prev + 1:
            raise DataError(f"{path}: months are not consecutive at {d} (missing or out-of-order month)")
        prev = idx


# trajectory panels


def write_trajectories(path, trajectories) -> None:
    n = trajectories[0].n_sectors
    rows = []
    for tr in trajectories:
        for t, d in enumerate(tr.dates):
            rows.append([d, tr.fund_id, "holding", *map(fmt, tr.holdings[t])])
            rows.append([d, tr.fund_id, "trade", *map(fmt, tr.trades[t])])
    write_csv(path, ["date", "fund_id", "kind", *sector_columns(n)], rows)


def write_cashflows(path, trajectories) -> None:
    rows = [
        [d, tr.fund_id, fmt(tr.cashflow[t])] for tr in trajectories for t, d in enumerate(tr.dates)
    ]
    write_csv(path, ["date", "fund_id", "cashflow"], rows)


def write_series(path, dates, values, column: str = "value") -> None:
    write_csv(path, ["date", column], [[d, fmt(v)] for d, v in zip(dates, values)])


def write_sector_returns(path, dates, returns) -> None:
    returns = np.asarray(returns)
    write_csv(
        path,
        ["date", *sector_columns(returns.shape[1])],
        [[d, *map(fmt, r)] for d, r in zip(dates, returns)],
    )


def read_series(path) -> tuple[list[str], np.ndarray]:
    """A ``date,value`` CSV such as the benchmark file."""
    header, rows = _read_rows(path)
    if header[:1] != ["date"] or len(header) != 2:
        raise DataError(f"{path}: expected header 'date,value', got {','.join(header)}")
    dates, values = [], []
    for line, row in rows:
        if len(row) != 2:
            raise DataError(f"{path}:{line}: expected 2 fields, got {len(row)}")
        parse_month(row[0], path, line)
        dates.append(row[0])
        values.append(_float(row[1], path, line))
    check_consecutive(dates, path)
    return dates, np.array(values)


def read_sector_returns(path) -> tuple[list[str], np.ndarray]:
    header, rows = _read_rows(path)
    n = len(header) - 1
    if header[0] != "date" or n < 1 or header[1:] != sector_columns(n):
        raise DataError(f"{path}: expected header 'date,s01,...'")
    dates, out = [], []
    for line, row in rows:
        if len(row) != n + 1:
            raise DataError(f"{path}:{line}: expected {n + 1} fields, got {len(row)}")
        parse_month(row[0], path, line)
        dates.append(row[0])
        out.append([_float(v, path, line) for v in row[1:]])
    check_consecutive(dates, path)
    return dates, np.array(out)


def read_trajectories(holdings_path, cashflow_path, benchmark_path, aliases=None) -> list[FundTrajectory]:
    """Raw (un-normalized) trajectories from the three panel files.

    Every fund must cover exactly the benchmark's months. ``aliases`` maps
    source fund ids to the names used downstream.
    """
    aliases = aliases or {}
    bench_dates, bench = read_series(benchmark_path)
    header, rows = _read_rows(holdings_path)
    n = len(header) - 3
    if header[:3] != ["date", "fund_id", "kind"] or n < 1 or header[3:] != sector_columns(n):
        raise DataError(f"{holdings_path}: expected header 'date,fund_id,kind,s01,...'")
    panels: dict[str, dict[str, dict[str, list[float]]]] = {}
    for line, row in rows:
        if len(row) != n + 3:
            raise DataError(f"{holdings_path}:{line}: expected {n + 3} fields, got {len(row)}")
        date, fid, kind = row[0], row[1], row[2]
        parse_month(date, holdings_path, line)
        if kind not in ("holding", "trade"):
            raise DataError(f"{holdings_path}:{line}: kind must be 'holding' or 'trade', got {kind!r}")
        slot = panels.setdefault(fid, {"holding": {}, "trade": {}})[kind]
        if date in slot:
            raise DataError(f"{holdings_path}:{line}: duplicate {kind} row for {fid} {date}")
        slot[date] = [_float(v, holdings_path, line) for v in row[3:]]

    header, rows = _read_rows(cashflow_path)
    if header != ["date", "fund_id", "cashflow"]:
        raise DataError(f"{cashflow_path}: expected header 'date,fund_id,cashflow'")
    flows: dict[str, dict[str, float]] = {}
    for line, row in rows:
        if len(row) != 3:
            raise DataError(f"{cashflow_path}:{line}: expected 3 fields, got {len(row)}")
        parse_month(row[0], cashflow_path, line)
        flows.setdefault(row[1], {})[row[0]] = _float(row[2], cashflow_path, line)

    if not panels:
        raise DataError(f"{holdings_path}: no fund rows")
    out = []
    for fid in sorted(panels):
        for kind in ("holding", "trade"):
            got = set(panels[fid][kind])
            if got != set(bench_dates):
                missing = sorted(set(bench_dates) - got)
                extra = sorted(got - set(bench_dates))
                raise DataError(
                    f"{holdings_path}: fund {fid} {kind} rows do not match benchmark months "
                    f"(missing {missing[:3]}, extra {extra[:3]})"
                )
        fl = flows.get(fid, {})
        if set(fl) != set(bench_dates):
            raise DataError(f"{cashflow_path}: fund {fid} cashflows do not cover the benchmark months")
        out.append(
            FundTrajectory(
                fund_id=aliases.get(fid, fid),
                holdings=np.array([panels[fid]["holding"][d] for d in bench_dates]),
                trades=np.array([panels[fid]["trade"][d] for d in bench_dates]),
                benchmark=bench,
                cashflow=np.array([fl[d] for d in bench_dates]),
                dates=tuple(bench_dates),
            )
        )
    return out


# key-value text files


def emit_kv(items) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items)


def parse_kv(text: str, source="<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment line. Duplicate keys are errors."""
    out: dict[str, str] = {}
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{i}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{i}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _vec(a) -> str:
    return " ".join(fmt(v) for v in np.ravel(a))


def _parse_vec(text: str, source, key) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split()])
    except ValueError:
        raise DataError(f"{source}: bad numbers in {key!r}") from None


def fit_result_text(fit: FitResult, metrics=None, scale: float | None = None) -> str:
    p = fit.params
    items = [
        ("rho", fmt(p.rho)),
        ("eta", fmt(p.eta)),
        ("lam", fmt(p.lam)),
        ("omega", fmt(p.omega)),
        ("iterations", str(fit.iterations)),
        ("final_loss", fmt(fit.loss_history[-1])),
    ]
    if scale is not None:
        items.append(("reward_scale", fmt(scale)))
    for k, v in sorted((metrics or {}).items()):
        items.append((f"train_{k}", fmt(v)))
    items.append(("loss_history", _vec(fit.loss_history)))
    for name in ("rho", "eta", "lam", "omega"):
        items.append((f"{name}_history", _vec([getattr(q, name) for q in fit.param_history])))
    return emit_kv(items)


def read_fit_params(path) -> RewardParams:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    kv = parse_kv(path.read_text(encoding="utf-8"), path)
    try:
        return RewardParams(*(float(kv[k]) for k in ("rho", "eta", "lam", "omega")))
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def fit_trace_rows(fit: FitResult):
    return [
        [str(i), fmt(loss), fmt(p.rho), fmt(p.eta), fmt(p.lam), fmt(p.omega)]
        for i, (loss, p) in enumerate(zip(fit.loss_history, fit.param_history))
    ]


FIT_TRACE_HEADER = ["iteration", "loss", "rho", "eta", "lam", "omega"]


def policy_text(policy: GaussianPolicy, extra=()) -> str:
    n = policy[0].intercept.shape[0]
    items = [("n_sectors", str(n)), ("horizon", str(policy.horizon)), *extra]
    for t, step in enumerate(policy):
        items += [
            (f"t{t}.intercept", _vec(step.intercept)),
            (f"t{t}.gain", _vec(step.gain)),
            (f"t{t}.cov", _vec(step.cov)),
        ]
    return emit_kv(items)


def read_policy(path) -> tuple[GaussianPolicy, dict[str, str]]:
    """Policy steps plus the remaining header keys."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    kv = parse_kv(path.read_text(encoding="utf-8"), path)
    try:
        n = int(kv.pop("n_sectors"))
        T = int(kv.pop("horizon"))
        steps = []
        for t in range(T + 1):
            b = _parse_vec(kv.pop(f"t{t}.intercept"), path, "intercept")
            g = _parse_vec(kv.pop(f"t{t}.gain"), path, "gain").reshape(n, n)
            c = _parse_vec(kv.pop(f"t{t}.cov"), path, "cov").reshape(n, n)
            steps.append(PolicyStep(b, g, c))
    except KeyError as exc:
        raise DataError(f"{path}: missing key {exc}") from None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    return GaussianPolicy(tuple(steps)), kv
