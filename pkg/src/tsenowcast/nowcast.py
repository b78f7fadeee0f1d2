"""Two-period nowcasts: stacked log-linear models fitted by EM.

The base period is complete. For the current period only aggregates over the
missing samples are known (stage ``a``: the size of A; stage ``b``: the A-B
cross-classification). The EM algorithm splits the aggregates into completed
cells, refits the stacked model, and repeats. The current-period intercept,
and at stage ``b`` the current-period shifts of the A and B effects, absorb
the aggregates; every other coefficient is shared with the base period.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .estimators import PopulationEstimate, tse
from .loglinear import (
    ConvergenceError,
    DesignMatrix,
    FitResult,
    ModelSpec,
    design_matrix,
    fit_poisson,
    normalize_family,
    poisson_loglik,
)
from .tables import (
    ALL_PATTERNS,
    OBSERVED_PATTERNS,
    AggregatedCounts,
    PeriodTable,
    StackedTable,
    TableError,
)

__all__ = [
    "STAGE_GROUPS",
    "StackedModel",
    "CompletedTable",
    "NowcastResult",
    "build_stacked_model",
    "initialize",
    "e_step",
    "em_fit",
    "nowcast_estimate",
    "completed_counts",
    "observed_loglik",
]

# aggregate -> completed cells; the last cell of each group takes the rounding residual
STAGE_GROUPS: dict[str, dict[str, tuple[str, ...]]] = {
    "a": {"1++": ("111", "110", "101", "100")},
    "b": {"11+": ("111", "110"), "10+": ("101", "100"), "01+": ("011", "010")},
}

STAGE_PERIOD_TERMS = {"a": ("shift",), "b": ("shift", "A-shift", "B-shift")}


@dataclass(frozen=True)
class StackedModel:
    base_family: str
    stage: str
    spec: ModelSpec
    cells: tuple[tuple[int, str], ...]

    @property
    def n_params(self) -> int:
        return len(self.spec.names)

    @property
    def df(self) -> int:
        return len(self.cells) - self.n_params

    def design(self) -> DesignMatrix:
        return design_matrix(self.spec, self.cells)


@dataclass(frozen=True)
class CompletedTable:
    """Base counts plus the current period's completed (fractional) cells."""

    base: PeriodTable
    stage: str
    cells: Mapping[str, float]

    def sums(self) -> dict[str, float]:
        """Left-to-right sum of each group's completed cells."""
        if self.stage == "c":
            return {}
        return {agg: sum(self.cells[k] for k in group) for agg, group in STAGE_GROUPS[self.stage].items()}

    def as_array(self) -> np.ndarray:
        return np.array([self.cells[k] for k in _current_cells(self.stage)], dtype=float)


@dataclass(frozen=True)
class NowcastResult:
    stacked: StackedTable
    model: StackedModel | None
    completed: CompletedTable
    fit: FitResult
    m_nc: dict[str, float]
    N_nc: float
    iterations: int
    trace: tuple[float, ...]
    converged: bool = True
    estimate: PopulationEstimate | None = field(default=None, repr=False)

    @property
    def stage(self) -> str:
        return self.completed.stage

    def to_dict(self) -> dict:
        return {
            "stage": self.stage,
            "base_family": self.model.base_family if self.model else self.fit.spec.family,
            "base_period": self.stacked.base.period,
            "current_period": self.stacked.current.period,
            "N_nc": self.N_nc,
            "m_nc": dict(self.m_nc),
            "completed": dict(self.completed.cells),
            "em_iterations": self.iterations,
            "converged": self.converged,
            "loglik_trace_last": self.trace[-1] if self.trace else None,
            "loglik_convention": "independent Poisson: base cells and current aggregates",
            "params": dict(zip(self.fit.names, map(float, self.fit.params))),
            "deviance": self.fit.deviance,
            "df": self.fit.df,
        }


def _current_cells(stage: str) -> tuple[str, ...]:
    if stage == "c":
        return OBSERVED_PATTERNS
    return tuple(k for group in STAGE_GROUPS[stage].values() for k in group)


def build_stacked_model(family: str, stage: str) -> StackedModel:
    """Base family plus the period terms that the stage's aggregates identify."""
    family = normalize_family(family)
    if stage not in STAGE_GROUPS:
        raise ValueError(f"stacked models exist for stages a and b, not {stage!r}")
    spec = ModelSpec.family_spec(family, STAGE_PERIOD_TERMS[stage])
    cells = tuple((0, k) for k in OBSERVED_PATTERNS) + tuple((1, k) for k in _current_cells(stage))
    return StackedModel(family, stage, spec, cells)


def _split(total: float, weights: Sequence[float]) -> list[float]:
    """Allocate ``total`` proportionally; the last share is the exact residual."""
    denom = math.fsum(weights)
    if not denom > 0:
        raise ZeroDivisionError("zero fitted denominator in E-step")
    parts = [total * w / denom for w in weights[:-1]]
    head = sum(parts)
    rest = total - head
    # make head + rest reproduce total exactly in binary arithmetic
    for _ in range(4):
        if head + rest == total:
            break
        rest = math.nextafter(rest, math.inf if head + rest < total else -math.inf)
    return parts + [max(rest, 0.0)]


def _base_of(aggregated) -> tuple[str, AggregatedCounts]:
    if not isinstance(aggregated, AggregatedCounts):
        raise TableError("expected aggregated counts")
    return aggregated.stage, aggregated


def initialize(aggregated: AggregatedCounts, weights: Sequence[float] | None = None) -> dict[str, float]:
    """Initial split of each aggregate: equal shares unless ``weights`` given.

    For stage ``b`` ``weights=(0.9, 0.1)`` puts 90% of every aggregate on the
    ``c=1`` cell.
    """
    stage, agg = _base_of(aggregated)
    out = {}
    for key, group in STAGE_GROUPS[stage].items():
        w = [1.0] * len(group) if weights is None else list(weights)
        if len(w) != len(group):
            raise ValueError(f"need {len(group)} initial weights for stage {stage}")
        total = agg[key]
        shares = _split(float(total), w) if total else [0.0] * len(group)
        out.update(zip(group, shares))
    return out


def e_step(aggregated: AggregatedCounts, fitted: Mapping) -> dict[str, float]:
    """Split each aggregate proportionally to the fitted current-period cells.

    ``fitted`` may be keyed by pattern or by ``(1, pattern)``.
    """
    stage, agg = _base_of(aggregated)
    out = {}
    for key, group in STAGE_GROUPS[stage].items():
        weights = [fitted[(1, k)] if (1, k) in fitted else fitted[k] for k in group]
        if min(weights) < 0:
            raise ValueError("fitted values must be positive")
        out.update(zip(group, _split(float(agg[key]), weights)))
    return out


def observed_loglik(stacked: StackedTable, fit: FitResult) -> float:
    """Poisson log-likelihood of the data actually observed.

    Base cells enter individually; the current period enters through its
    aggregates, whose expectations are sums of fitted cells.
    """
    base_y = np.array(stacked.base.as_list(), dtype=float)
    base_mu = np.array([fit.fitted[(0, k)] for k in OBSERVED_PATTERNS])
    agg = stacked.current
    groups = STAGE_GROUPS[agg.stage]
    agg_y = np.array([agg[k] for k in groups], dtype=float)
    agg_mu = np.array([sum(fit.fitted[(1, c)] for c in cells) for cells in groups.values()])
    return poisson_loglik(base_y, base_mu) + poisson_loglik(agg_y, agg_mu)


def _complete_stage(stacked: StackedTable, family: str, fit_options: dict) -> NowcastResult:
    estimate = tse(stacked.current, family, variance=True, **fit_options)
    fit = estimate.fit
    completed = CompletedTable(stacked.base, "c", {k: float(v) for k, v in stacked.current.counts.items()})
    m_nc = {k: fit.fitted[(0, k)] for k in ALL_PATTERNS}
    return NowcastResult(
        stacked=stacked,
        model=None,
        completed=completed,
        fit=fit,
        m_nc=m_nc,
        N_nc=estimate.N,
        iterations=0,
        trace=(fit.loglik,),
        estimate=estimate,
    )


def em_fit(
    stacked: StackedTable,
    family: str = "saturated",
    stage: str | None = None,
    tol: float = 1e-8,
    max_iter: int = 10_000,
    init: Sequence[float] | None = None,
    fit_tol: float = 1e-10,
    fit_max_iter: int = 100,
) -> NowcastResult:
    """Nowcast the current period of ``stacked``.

    ``stage`` defaults to the data's stage; asking for an earlier stage than
    the data provide hides the late samples first. Stage ``c`` (current
    period complete) is a plain single-period fit of the current table.

    EM stops when no completed count moves by ``tol`` or more. A final
    M-step on the converged completed counts gives the reported fit.
    """
    family = normalize_family(family)
    stage = stage or stacked.stage
    stacked = stacked.hold_out(stage)
    stacked.base.require_complete()
    fit_options = {"tol": fit_tol, "max_iter": fit_max_iter}
    if stage == "c":
        return _complete_stage(stacked, family, fit_options)

    model = build_stacked_model(family, stage)
    design = model.design()
    agg = stacked.current
    base_y = np.array(stacked.base.as_list(), dtype=float)
    order = _current_cells(stage)

    def m_step(cells: Mapping[str, float], start, it) -> FitResult:
        y = np.concatenate([base_y, [cells[k] for k in order]])
        try:
            return fit_poisson(design, y, start=start, **fit_options)
        except ConvergenceError as err:
            raise type(err)(f"M-step failed at EM iteration {it}: {err}") from err

    completed = initialize(agg, init)
    fit = m_step(completed, None, 0)
    trace = [observed_loglik(stacked, fit)]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        try:
            new = e_step(agg, fit.fitted)
        except ZeroDivisionError as err:
            raise ConvergenceError(f"E-step failed at EM iteration {it}: {err}") from err
        delta = max(abs(new[k] - completed[k]) for k in order)
        completed = new
        fit = m_step(completed, fit.params, it)
        trace.append(observed_loglik(stacked, fit))
        if delta < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"EM did not converge in {max_iter} iterations")

    m_nc = {k: fit.fitted[(1, k)] for k in ALL_PATTERNS}
    return NowcastResult(
        stacked=stacked,
        model=model,
        completed=CompletedTable(stacked.base, stage, completed),
        fit=fit,
        m_nc=m_nc,
        N_nc=math.fsum(m_nc.values()),
        iterations=it,
        trace=tuple(trace),
    )


def nowcast_estimate(result: NowcastResult) -> float:
    """Sum of the fitted current-period cells, all eight patterns."""
    if result.stage == "c":
        return result.N_nc
    return math.fsum(result.m_nc[k] for k in ALL_PATTERNS)


def completed_counts(result: NowcastResult) -> CompletedTable:
    return result.completed
