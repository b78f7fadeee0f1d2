"""Year-by-year comparison of nowcasts with the full-data estimates.

For every year with a complete table the series holds the saturated TSE with
its interval, the DSE for each pair of samples, and (when the previous year is
present) the stage-b nowcast for each choice of late sample. Orders are named
after the two samples assumed available: ``"ab"`` nowcasts with C missing,
``"ac"`` with B missing and ``"bc"`` with A missing.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .estimators import DependenceEstimate, PopulationEstimate, dse_from_table, pairwise_dependence, tse
from .loglinear import ConvergenceError
from .nowcast import NowcastResult, em_fit
from .tables import PeriodTable, StackedTable

__all__ = [
    "ORDERS",
    "YearRecord",
    "DMResult",
    "ZeroVarianceError",
    "build_year_series",
    "differences",
    "error_table",
    "mae",
    "dm_test",
    "dm_pairwise",
    "singleton_comparison",
    "lambda_series",
    "estimates_table",
    "rows_to_csv",
    "evaluate",
]

# available pair -> (arrival order for relabeling, held-out singleton in original labels)
ORDERS: dict[str, tuple[str, str]] = {
    "bc": ("bca", "100"),
    "ac": ("acb", "010"),
    "ab": ("abc", "001"),
}
PAIR_NAMES = {"ab": "AB", "ac": "AC", "bc": "BC"}


class ZeroVarianceError(ValueError):
    """The loss differential has zero sample variance."""


@dataclass
class YearRecord:
    year: int
    table: PeriodTable | None
    tse: PopulationEstimate | None = None
    dse: dict[str, PopulationEstimate] = field(default_factory=dict)
    nc: dict[str, NowcastResult | None] = field(default_factory=dict)
    dependence: DependenceEstimate | None = None
    errors: list[str] = field(default_factory=list)

    @property
    def gap(self) -> bool:
        return self.table is None

    def nowcast_singleton(self, order: str) -> float | None:
        """Nowcast of the cell seen only by the held-out sample, original labels."""
        result = self.nc.get(order)
        return None if result is None else result.m_nc["001"]


def build_year_series(
    tables: Mapping[int, PeriodTable | None],
    family: str = "saturated",
    level: float = 0.95,
    tol: float = 1e-8,
    max_iter: int = 10_000,
) -> dict[int, YearRecord]:
    """Estimates for every year; ``None`` tables are kept as explicit gaps."""
    series: dict[int, YearRecord] = {}
    for year in sorted(tables):
        table = tables[year]
        rec = YearRecord(year, table)
        series[year] = rec
        if table is None:
            continue
        try:
            rec.tse = tse(table, "saturated", level=level)
            rec.dependence = pairwise_dependence(rec.tse.fit)
        except (ConvergenceError, ValueError) as err:
            rec.errors.append(f"tse: {err}")
        for order in ORDERS:
            try:
                rec.dse[order] = dse_from_table(table, PAIR_NAMES[order])
            except ValueError as err:
                rec.errors.append(f"dse {order}: {err}")
        prev = tables.get(year - 1)
        if prev is None:
            continue
        for order, (arrival, _) in ORDERS.items():
            stacked = StackedTable(prev, table).relabel(arrival)
            try:
                rec.nc[order] = em_fit(stacked, family, "b", tol=tol, max_iter=max_iter)
            except (ConvergenceError, ValueError) as err:
                rec.nc[order] = None
                rec.errors.append(f"nc {order}: {err}")
    return series


def differences(values: Mapping, reference: Mapping) -> dict:
    """``values[k] - reference[k]`` where both exist; ``None`` otherwise."""
    out = {}
    for key in values:
        a, b = values.get(key), reference.get(key)
        out[key] = None if a is None or b is None else a - b
    return out


def _tse_N(rec: YearRecord | None) -> float | None:
    return rec.tse.N if rec is not None and rec.tse is not None else None


def error_table(series: Mapping[int, YearRecord]) -> list[dict]:
    """Per-year errors against that year's TSE.

    Columns: ``lagged_tse`` (previous year's TSE minus this year's) and
    ``nc_bc``, ``nc_ac``, ``nc_ab``. Years whose previous year is missing are
    skipped, as are gap years.
    """
    rows = []
    for year, rec in series.items():
        prev = series.get(year - 1)
        if rec.gap or prev is None or prev.gap:
            continue
        ref = _tse_N(rec)
        candidates = {"lagged_tse": _tse_N(prev)}
        for order in ORDERS:
            result = rec.nc.get(order)
            candidates[f"nc_{order}"] = None if result is None else result.N_nc
        diff = differences(candidates, dict.fromkeys(candidates, ref))
        rows.append({"year": year, **diff})
    return rows


def mae(errors: Sequence[float]) -> float:
    errors = [float(e) for e in errors]
    if not errors:
        raise ValueError("mean absolute error of an empty list")
    return math.fsum(abs(e) for e in errors) / len(errors)


@dataclass(frozen=True)
class DMResult:
    statistic: float
    p_value: float
    n: int


def dm_test(errors1: Sequence[float], errors2: Sequence[float]) -> DMResult:
    """Diebold-Mariano test, absolute-error loss, horizon 1.

    ``d_t = |e1_t| - |e2_t|``; the statistic is ``mean(d) / sqrt(gamma0 / T)``
    with ``gamma0`` the lag-0 autocovariance (divisor ``T``). Two-sided p-value
    from the standard normal. Negative statistics favour the first series.
    """
    e1 = np.asarray(errors1, dtype=float)
    e2 = np.asarray(errors2, dtype=float)
    if e1.shape != e2.shape or e1.ndim != 1:
        raise ValueError("error series must be 1-d and of equal length")
    T = e1.size
    if T < 3:
        raise ValueError("need at least 3 paired errors")
    d = np.abs(e1) - np.abs(e2)
    gamma0 = float(np.mean((d - d.mean()) ** 2))
    if gamma0 <= 0.0:
        raise ZeroVarianceError("zero loss differential variance")
    stat = float(d.mean() / math.sqrt(gamma0 / T))
    return DMResult(stat, float(2.0 * norm.sf(abs(stat))), T)


def dm_pairwise(rows: Sequence[Mapping], columns: Sequence[str]) -> list[dict]:
    """DM test for every pair of error columns, over years where both exist."""
    out = []
    for a, b in combinations(columns, 2):
        pairs = [(r[a], r[b]) for r in rows if r.get(a) is not None and r.get(b) is not None]
        entry = {"first": a, "second": b, "n": len(pairs)}
        try:
            res = dm_test([p[0] for p in pairs], [p[1] for p in pairs])
            entry.update(statistic=res.statistic, p_value=res.p_value, error=None)
        except ValueError as err:
            entry.update(statistic=None, p_value=None, error=str(err))
        out.append(entry)
    return out


def singleton_comparison(series: Mapping[int, YearRecord]) -> tuple[list[dict], dict]:
    """Observed singleton counts next to their nowcasts.

    For each held-out sample the nowcast of the cell seen only by that sample
    is paired with the count observed once the sample arrives. Also returns
    MAEs of those nowcasts and of the naive previous-year observation.
    """
    rows = []
    nc_err = {cell: [] for _, cell in ORDERS.values()}
    lag_err = {cell: [] for _, cell in ORDERS.values()}
    for year, rec in series.items():
        row = {"year": year}
        prev = series.get(year - 1)
        for order, (_, cell) in ORDERS.items():
            observed = None if rec.gap else rec.table[cell]
            nowcast = rec.nowcast_singleton(order)
            row[f"n_{cell}"] = observed
            row[f"nc_{cell}"] = nowcast
            if observed is not None and nowcast is not None:
                nc_err[cell].append(nowcast - observed)
            if observed is not None and prev is not None and not prev.gap:
                lag_err[cell].append(prev.table[cell] - observed)
        rows.append(row)
    summary = {}
    for cell in nc_err:
        summary[f"mae_nc_{cell}"] = mae(nc_err[cell]) if nc_err[cell] else None
        summary[f"mae_lagged_{cell}"] = mae(lag_err[cell]) if lag_err[cell] else None
    return rows, summary


def lambda_series(series: Mapping[int, YearRecord]) -> list[dict]:
    """Both dependence definitions per pair and year; gaps stay empty."""
    rows = []
    for year, rec in series.items():
        row = {"year": year}
        dep = rec.dependence
        for pair in ("AB", "AC", "BC"):
            row[f"linear_{pair}"] = None if dep is None else dep.linear[pair]
            row[f"collapsed_{pair}"] = None if dep is None else dep.collapsed[pair]
        rows.append(row)
    return rows


def estimates_table(series: Mapping[int, YearRecord]) -> list[dict]:
    rows = []
    for year, rec in series.items():
        prev = series.get(year - 1)
        est = rec.tse
        row = {
            "year": year,
            "n": None if rec.gap else rec.table.n,
            "tse": None if est is None else est.N,
            "tse_lower": None if est is None or est.ci is None else est.ci[0],
            "tse_upper": None if est is None or est.ci is None else est.ci[1],
            "lagged_tse": _tse_N(prev) if not rec.gap else None,
        }
        for order in ORDERS:
            d = rec.dse.get(order)
            row[f"dse_{order}"] = None if d is None else d.N
        for order in ORDERS:
            r = rec.nc.get(order)
            row[f"nc_{order}"] = None if r is None else r.N_nc
        rows.append(row)
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".10g")
    return str(value)


def rows_to_csv(rows: Sequence[Mapping], columns: Sequence[str] | None = None) -> str:
    """CSV with floats at 10 significant digits; ``None`` becomes empty."""
    if columns is None:
        columns = list(rows[0]) if rows else []
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    return out.getvalue()


ERROR_COLUMNS = ("lagged_tse", "nc_bc", "nc_ac", "nc_ab")


def evaluate(tables: Mapping[int, PeriodTable | None], family: str = "saturated", level: float = 0.95) -> dict:
    """Run the full comparison; returns CSV texts and a summary dict."""
    series = build_year_series(tables, family, level)
    errors = error_table(series)
    singles, single_summary = singleton_comparison(series)
    maes = {}
    for col in ERROR_COLUMNS:
        vals = [r[col] for r in errors if r[col] is not None]
        maes[col] = mae(vals) if vals else None
    summary = {
        "family": family,
        "level": level,
        "years": list(series),
        "gaps": [y for y, r in series.items() if r.gap],
        "mae": maes,
        "dm_tests": dm_pairwise(errors, ERROR_COLUMNS),
        "singletons": single_summary,
        "errors": {str(y): r.errors for y, r in series.items() if r.errors},
    }
    return {
        "series": series,
        "csv": {
            "estimates.csv": rows_to_csv(estimates_table(series)),
            "errors.csv": rows_to_csv(errors, ["year", *ERROR_COLUMNS]),
            "singletons.csv": rows_to_csv(singles),
            "lambda.csv": rows_to_csv(lambda_series(series)),
        },
        "summary": summary,
    }
