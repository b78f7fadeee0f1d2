"""Synthetic populations with known log-linear inclusion structure.

Used to check the estimators against known truth: bias, RMSE and interval
coverage under stable or drifting pairwise dependence.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .estimators import dse_from_table, tse
from .loglinear import ConvergenceError
from .nowcast import em_fit
from .tables import ALL_PATTERNS, PeriodTable, StackedTable

__all__ = [
    "MU_TERMS",
    "SimConfig",
    "SimulatedPeriod",
    "cell_probabilities",
    "expected_counts",
    "simulate_period",
    "analytic_dse_bias",
    "analytic_nowcast_a",
    "analytic_nowcast_b",
    "report_csv",
    "run_bias_study",
    "simulate_series",
    "ESTIMATORS",
]

MU_TERMS = ("A", "B", "C", "AB", "AC", "BC")
ESTIMATORS = ("dse", "tse", "nc_a", "nc_b")


def _log_weight(pattern: str, mu: Mapping[str, float]) -> float:
    bits = dict(zip("ABC", map(int, pattern)))
    total = 0.0
    for term in MU_TERMS:
        if all(bits[ch] for ch in term):
            value = float(mu.get(term, 0.0))
            if value == -math.inf:
                return -math.inf
            total += value
    return total


def cell_probabilities(mu: Mapping[str, float]) -> dict[str, float]:
    """Pattern probabilities proportional to ``exp`` of the active terms.

    Normalized over all eight patterns, 000 included. Unknown keys are
    rejected; missing terms are zero.
    """
    unknown = set(mu) - set(MU_TERMS)
    if unknown:
        raise ValueError(f"unknown parameter(s) {sorted(unknown)}")
    for key, value in mu.items():
        if math.isnan(float(value)) or float(value) == math.inf:
            raise ValueError(f"parameter {key} must be finite or -inf")
    logw = np.array([_log_weight(k, mu) for k in ALL_PATTERNS])
    w = np.exp(logw - logw.max())
    p = w / w.sum()
    return dict(zip(ALL_PATTERNS, map(float, p)))


def expected_counts(N: float, mu: Mapping[str, float]) -> dict[str, float]:
    return {k: N * p for k, p in cell_probabilities(mu).items()}


@dataclass(frozen=True)
class SimulatedPeriod:
    """An observed table plus the hidden number of never-observed units."""

    table: PeriodTable
    unobserved: int

    @property
    def N(self) -> int:
        return self.table.n + self.unobserved


def simulate_period(N: int, mu: Mapping[str, float], rng: np.random.Generator, period=0) -> SimulatedPeriod:
    """Multinomial draw of ``N`` units, done as a chain of binomials."""
    probs = cell_probabilities(mu)
    remaining, mass = int(N), 1.0
    counts = {}
    for key in ALL_PATTERNS[:-1]:
        p = probs[key]
        share = min(1.0, p / mass) if mass > 0 else 0.0
        draw = int(rng.binomial(remaining, share)) if remaining > 0 and share > 0 else 0
        counts[key] = draw
        remaining -= draw
        mass -= p
    return SimulatedPeriod(PeriodTable(period, counts), remaining)


def analytic_dse_bias(mu: Mapping[str, float]) -> float:
    """Limit of ``N_dse / N - 1`` for samples A and B, C collapsed."""
    p = cell_probabilities(mu)
    p11 = p["111"] + p["110"]
    pa = p11 + p["101"] + p["100"]
    pb = p11 + p["011"] + p["010"]
    return pa * pb / p11 - 1.0


def analytic_nowcast_b(N0: float, mu0, N1: float, mu1) -> float:
    """Stage-b nowcast (saturated base) evaluated on exact expectations.

    Returns the limit of ``N_nc / N1 - 1``. Uses the ratio-adjusted DSE form
    of the saturated stacked model, which only needs margins.
    """
    e0, e1 = expected_counts(N0, mu0), expected_counts(N1, mu1)

    def m(e, ab):
        return e[ab + "1"] + e[ab + "0"]

    # saturated fit reproduces the observed expectations, and e0["000"] itself
    m00_t0 = m(e0, "00")
    odds_t0 = m(e0, "11") * m00_t0 / (m(e0, "10") * m(e0, "01"))
    m00_t1 = m(e1, "10") * m(e1, "01") / m(e1, "11") * odds_t0
    nc = m(e1, "11") + m(e1, "10") + m(e1, "01") + m00_t1
    return nc / N1 - 1.0


@dataclass(frozen=True)
class SimConfig:
    """Two-period simulation study.

    ``mu_current`` defaults to ``mu_base``. Each scenario adds its ``drift``
    (term -> increment) to the current-period parameters.
    """

    N_base: int = 100_000
    N_current: int = 100_000
    mu_base: Mapping[str, float] = field(default_factory=dict)
    mu_current: Mapping[str, float] | None = None
    scenarios: tuple = (("baseline", {}),)
    replications: int = 200
    seed: int = 0
    level: float = 0.95
    family: str = "saturated"
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be positive")
        if self.N_base < 0 or self.N_current < 0:
            raise ValueError("population sizes must be nonnegative")
        object.__setattr__(self, "mu_base", dict(self.mu_base))
        object.__setattr__(self, "mu_current", dict(self.mu_current) if self.mu_current is not None else None)
        scen = []
        for item in self.scenarios:
            if isinstance(item, Mapping):
                name, drift = item.get("name", f"scenario{len(scen)}"), item.get("drift", {})
            else:
                name, drift = item
            scen.append((str(name), dict(drift)))
        object.__setattr__(self, "scenarios", tuple(scen))
        cell_probabilities(self.mu_base)
        for _, drift in self.scenarios:
            cell_probabilities(self.current_mu(drift))

    def current_mu(self, drift: Mapping[str, float]) -> dict[str, float]:
        mu = dict(self.mu_current if self.mu_current is not None else self.mu_base)
        for key, value in drift.items():
            mu[key] = mu.get(key, 0.0) + value
        return mu

    @classmethod
    def from_dict(cls, data: Mapping) -> "SimConfig":
        data = dict(data)
        if "N" in data:
            N = data.pop("N")
            data["N_base"], data["N_current"] = (N, N) if isinstance(N, (int, float)) else N
        if "scenarios" in data:
            data["scenarios"] = tuple(data["scenarios"])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["scenarios"] = [{"name": n, "drift": d} for n, d in self.scenarios]
        return out


def _replicate(config: SimConfig, scenario: int, rep: int):
    name, drift = config.scenarios[scenario]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, scenario, rep]))
    t0 = simulate_period(config.N_base, config.mu_base, rng, period=0)
    t1 = simulate_period(config.N_current, config.current_mu(drift), rng, period=1)
    stacked = StackedTable(t0.table, t1.table)
    out: dict[str, tuple] = {}

    def attempt(key, fn):
        try:
            out[key] = fn()
        except (ConvergenceError, ValueError, ZeroDivisionError) as err:
            out[key] = (None, None, f"{type(err).__name__}: {err}")

    attempt("dse", lambda: (dse_from_table(t1.table, "AB").N, None, None))

    def do_tse():
        est = tse(t1.table, config.family, level=config.level)
        return est.N, est.ci, None

    attempt("tse", do_tse)
    attempt("nc_a", lambda: (em_fit(stacked, config.family, "a").N_nc, None, None))
    attempt("nc_b", lambda: (em_fit(stacked, config.family, "b").N_nc, None, None))
    return t1.N, out


def run_bias_study(config: SimConfig) -> dict:
    """Score DSE, TSE and stage a/b nowcasts against the simulated truth.

    Returns ``{"config": ..., "rows": [...]}`` with one row per scenario and
    estimator. Relative bias is ``mean(N_hat / N - 1)`` where ``N`` is the
    realized population size of the replicate.
    """
    rows = []
    for s, (name, drift) in enumerate(config.scenarios):
        reps = range(config.replications)
        if config.workers > 1:
            with ThreadPoolExecutor(max_workers=config.workers) as pool:
                results = list(pool.map(lambda r: _replicate(config, s, r), reps))
        else:
            results = [_replicate(config, s, r) for r in reps]
        mu1 = config.current_mu(drift)
        analytic = {
            "dse": analytic_dse_bias(mu1),
            "tse": 0.0,
            "nc_a": analytic_nowcast_a(config.N_base, config.mu_base, config.N_current, mu1),
            "nc_b": analytic_nowcast_b(config.N_base, config.mu_base, config.N_current, mu1),
        }
        for est in ESTIMATORS:
            rel, sq, covered, n_ci = [], [], 0, 0
            failures = 0
            for true_N, out in results:
                value, ci, err = out[est]
                if err is not None:
                    failures += 1
                    continue
                rel.append(value / true_N - 1.0)
                sq.append((value - true_N) ** 2)
                if ci is not None:
                    n_ci += 1
                    covered += ci[0] <= true_N <= ci[1]
            ok = len(rel)
            rows.append(
                {
                    "scenario": name,
                    "estimator": est,
                    "replications": ok,
                    "failures": failures,
                    "mean_relative_bias": float(np.mean(rel)) if ok else None,
                    "relative_bias_se": float(np.std(rel, ddof=1) / math.sqrt(ok)) if ok > 1 else None,
                    "rmse": float(math.sqrt(np.mean(sq))) if ok else None,
                    "coverage": covered / n_ci if n_ci else None,
                    "analytic_relative_bias": analytic[est],
                }
            )
    return {"config": config.to_dict(), "rows": rows}


def analytic_nowcast_a(N0: float, mu0, N1: float, mu1) -> float:
    """Stage-a nowcast limit: base-period size scaled by the ratio of A sizes."""
    e0, e1 = expected_counts(N0, mu0), expected_counts(N1, mu1)
    a0 = sum(v for k, v in e0.items() if k[0] == "1")
    a1 = sum(v for k, v in e1.items() if k[0] == "1")
    return N0 * a1 / a0 / N1 - 1.0


REPORT_COLUMNS = (
    "scenario",
    "estimator",
    "replications",
    "failures",
    "mean_relative_bias",
    "relative_bias_se",
    "rmse",
    "coverage",
    "analytic_relative_bias",
)


def report_csv(report: dict) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in report["rows"]:
        writer.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return out.getvalue()


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def simulate_series(
    years: Sequence[int],
    N: Mapping[int, int],
    mu: Mapping[int, Mapping[str, float]],
    seed: int,
    missing: Sequence[int] = (),
) -> dict[int, PeriodTable | None]:
    """One simulated table per year; years in ``missing`` map to ``None``."""
    out: dict[int, PeriodTable | None] = {}
    for i, year in enumerate(years):
        if year in missing:
            out[year] = None
            continue
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        out[year] = simulate_period(N[year], mu[year], rng, period=year).table
    return out
