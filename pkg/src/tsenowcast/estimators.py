"""Single-period population-size estimators (two- and three-sample)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .loglinear import FitResult, ModelSpec, fit_cells, normalize_family
from .tables import OBSERVED_PATTERNS, PeriodTable, TableError

__all__ = [
    "PopulationEstimate",
    "DependenceEstimate",
    "dse",
    "tse",
    "saturated_variance",
    "confidence_interval",
    "pairwise_dependence",
    "closed_form_m000",
    "dse_from_table",
]

PAIRS = ("AB", "AC", "BC")


@dataclass(frozen=True)
class PopulationEstimate:
    n: int
    m000: float
    N: float
    family: str
    variance: float | None = None
    ci: tuple[float, float] | None = None
    fit: FitResult | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.ci is not None and not (self.ci[0] <= self.N <= self.ci[1]):
            raise ValueError(f"interval {self.ci} does not contain the estimate {self.N}")

    def to_dict(self) -> dict:
        out = {
            "n": self.n,
            "m000": self.m000,
            "N": self.N,
            "family": self.family,
            "variance": self.variance,
            "ci": list(self.ci) if self.ci is not None else None,
        }
        if self.fit is not None:
            out["fit"] = {
                "params": dict(zip(self.fit.names, map(float, self.fit.params))),
                "loglik": self.fit.loglik,
                "loglik_convention": "independent Poisson per observed cell",
                "deviance": self.fit.deviance,
                "df": self.fit.df,
                "converged": self.fit.converged,
                "iterations": self.fit.iterations,
            }
        return out


@dataclass(frozen=True)
class DependenceEstimate:
    """Pairwise dependence of each sample pair in a saturated fit.

    ``linear`` adds the collapsed sample's main effect to the three
    interaction coefficients; ``collapsed`` is the log cross-ratio of the
    fitted 2x2 table obtained by summing over the third sample, 000 included.
    The two agree only in special cases.
    """

    linear: dict[str, float]
    collapsed: dict[str, float]


def dse(n11: int, n10: int, n01: int) -> PopulationEstimate:
    """Two-sample (Lincoln-Petersen) estimate under independence."""
    for value in (n11, n10, n01):
        if value < 0:
            raise ValueError("counts must be nonnegative")
    if n11 <= 0:
        raise ValueError("dual-system estimator undefined when n11 = 0")
    m00 = n10 * n01 / n11
    n = n11 + n10 + n01
    return PopulationEstimate(n=n, m000=m00, N=n + m00, family="dse")


def closed_form_m000(counts) -> float:
    """Zero three-factor interaction identity for the saturated model."""
    n111, n110, n101, n011, n100, n010, n001 = (float(c) for c in counts)
    return n111 * n100 * n010 * n001 / (n110 * n101 * n011)


def saturated_variance(table: PeriodTable, m000: float) -> float:
    """Delta-method variance of the saturated estimate: ``m000**2 * sum(1/n)``."""
    counts = table.as_list()
    if min(counts) <= 0:
        raise ValueError("saturated variance needs all seven cells positive")
    return m000 * m000 * sum(1.0 / c for c in counts)


def confidence_interval(
    estimate: PopulationEstimate,
    variance: float,
    level: float = 0.95,
    method: str = "lognormal",
) -> tuple[float, float]:
    """Interval for N.

    ``lognormal`` (default) puts a log-normal interval on ``m000`` and shifts
    it by ``n``, so the lower bound never drops below ``n``. ``normal`` is the
    symmetric ``N +- z * sd``.
    """
    if variance < 0:
        raise ValueError("variance must be nonnegative")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    if variance == 0:
        return (estimate.N, estimate.N)
    z = float(norm.ppf(0.5 + level / 2.0))
    sd = math.sqrt(variance)
    if method == "normal":
        return (estimate.N - z * sd, estimate.N + z * sd)
    if method != "lognormal":
        raise ValueError(f"unknown interval method {method!r}")
    m = estimate.m000
    if m <= 0:
        return (estimate.N, estimate.N + z * sd)
    spread = math.exp(z * sd / m)
    return (estimate.n + m / spread, estimate.n + m * spread)


def tse(
    table: PeriodTable,
    family: str = "saturated",
    variance: bool = True,
    level: float = 0.95,
    ci_method: str = "lognormal",
    tol: float = 1e-10,
    max_iter: int = 100,
) -> PopulationEstimate:
    """Fit a three-sample model to the seven observed cells and add ``m000``.

    Only the saturated family carries an analytic variance and interval.
    """
    family = normalize_family(family)
    counts = table.require_complete().as_list()
    fit = fit_cells(
        ModelSpec.family_spec(family),
        [(0, k) for k in OBSERVED_PATTERNS],
        counts,
        tol=tol,
        max_iter=max_iter,
    )
    m000 = fit.fitted[(0, "000")]
    n = table.n
    point = PopulationEstimate(n=n, m000=m000, N=n + m000, family=family, fit=fit)
    if not (variance and family == "saturated" and min(counts) > 0):
        return point
    var = saturated_variance(table, m000)
    ci = confidence_interval(point, var, level, ci_method)
    return PopulationEstimate(n=n, m000=m000, N=n + m000, family=family, variance=var, ci=ci, fit=fit)


def _pair_positions(pair: str) -> tuple[int, int, int]:
    i, j = "ABC".index(pair[0]), "ABC".index(pair[1])
    return i, j, 3 - i - j


def pairwise_dependence(fit: FitResult) -> DependenceEstimate:
    if fit.spec.family != "saturated" or fit.spec.period_terms:
        raise ValueError("pairwise dependence needs a single-period saturated fit")
    if not fit.converged:
        raise ValueError("fit did not converge")
    (period,) = {p for p, _ in fit.design.cells}
    cell = {k: fit.fitted[(period, k)] for k in ("000",) + OBSERVED_PATTERNS}
    interactions = fit.param("AB") + fit.param("AC") + fit.param("BC")
    linear, collapsed = {}, {}
    for pair in PAIRS:
        i, j, k = _pair_positions(pair)
        linear[pair] = fit.param("ABC"[k]) + interactions
        margin = {}
        for key, value in cell.items():
            ab = key[i] + key[j]
            margin[ab] = margin.get(ab, 0.0) + value
        collapsed[pair] = float(
            np.log(margin["11"]) + np.log(margin["00"]) - np.log(margin["10"]) - np.log(margin["01"])
        )
    return DependenceEstimate(linear=linear, collapsed=collapsed)


def dse_from_table(table: PeriodTable, pair: str = "AB") -> PopulationEstimate:
    """DSE on two samples of a complete table, ignoring the third."""
    if pair not in PAIRS:
        raise TableError(f"unknown pair {pair!r}")
    i, j, _ = _pair_positions(pair)
    margin = {"11": 0, "10": 0, "01": 0, "00": 0}
    for key, value in table.require_complete().counts.items():
        margin[key[i] + key[j]] += value
    return dse(margin["11"], margin["10"], margin["01"])
