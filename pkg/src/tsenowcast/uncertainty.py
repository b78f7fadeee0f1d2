"""Percentile bootstrap for DSE, TSE and nowcast estimates.

Each period is resampled independently: a complete period by a multinomial
draw of its ``n`` units over the seven observed cells, an aggregated period
by a multinomial over its aggregates. Replicate ``i`` draws from a generator
seeded with ``(seed, i)``, so results do not depend on how replicates are
scheduled across workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import dse, dse_from_table, tse
from .loglinear import ConvergenceError, normalize_family
from .nowcast import em_fit
from .tables import OBSERVED_PATTERNS, AggregatedCounts, PeriodTable, StackedTable, TableError

__all__ = [
    "BootstrapConfig",
    "EstimatorConfig",
    "BootstrapResult",
    "BootstrapError",
    "point_estimate",
    "resample",
    "bootstrap",
]

MAX_FAILURE_SHARE = 0.10


class BootstrapError(RuntimeError):
    """Too many replicates failed to produce an estimate."""


@dataclass(frozen=True)
class BootstrapConfig:
    replications: int = 1000
    level: float = 0.95
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.replications < 2:
            raise ValueError("need at least 2 bootstrap replications")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimate to bootstrap.

    ``kind`` is ``"dse"``, ``"tse"`` or ``"nowcast"``. ``pair`` selects the two
    samples for a DSE on a complete table; ``stage`` forces a nowcast stage.
    """

    kind: str = "tse"
    family: str = "saturated"
    stage: str | None = None
    pair: str = "AB"
    tol: float = 1e-8
    max_iter: int = 10_000

    def __post_init__(self):
        if self.kind not in ("dse", "tse", "nowcast"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        object.__setattr__(self, "family", normalize_family(self.family))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "family": self.family, "stage": self.stage, "pair": self.pair}


def point_estimate(data, estimator: EstimatorConfig) -> float:
    """Population-size estimate for one data set."""
    if estimator.kind == "nowcast":
        if not isinstance(data, StackedTable):
            raise TableError("a nowcast needs a stacked table")
        return em_fit(data, estimator.family, estimator.stage, tol=estimator.tol, max_iter=estimator.max_iter).N_nc
    current = data.current if isinstance(data, StackedTable) else data
    if estimator.kind == "tse":
        if not isinstance(current, PeriodTable):
            raise TableError("TSE needs a complete period")
        return tse(current, estimator.family, variance=False).N
    if isinstance(current, AggregatedCounts):
        if current.stage != "b":
            raise TableError("DSE needs the A-B cross-classification (stage b)")
        return dse(current["11+"], current["10+"], current["01+"]).N
    return dse_from_table(current, estimator.pair).N


def _draw(data, rng: np.random.Generator):
    if isinstance(data, PeriodTable):
        counts = np.array(data.as_list(), dtype=np.int64)
        n = int(counts.sum())
        draw = rng.multinomial(n, counts / n) if n else counts
        return PeriodTable(data.period, dict(zip(OBSERVED_PATTERNS, map(int, draw))))
    keys = list(data.entries)
    counts = np.array([data.entries[k] for k in keys], dtype=np.int64)
    n = int(counts.sum())
    draw = rng.multinomial(n, counts / n) if n else counts
    return AggregatedCounts(data.period, dict(zip(keys, map(int, draw))))


def resample(data, rng: np.random.Generator):
    """One bootstrap data set; every period keeps its observed total."""
    if isinstance(data, StackedTable):
        return StackedTable(_draw(data.base, rng), _draw(data.current, rng))
    return _draw(data, rng)


def _replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, index]))


@dataclass(frozen=True)
class BootstrapResult:
    point: float
    lower: float
    upper: float
    level: float
    replicates: np.ndarray = field(repr=False)
    failures: tuple[tuple[int, str], ...] = ()
    warnings: tuple[str, ...] = ()

    @property
    def sd(self) -> float:
        return float(np.std(self.replicates, ddof=1))

    def summary(self) -> dict:
        reps = self.replicates
        return {
            "ok": int(reps.size),
            "failed": len(self.failures),
            "mean": float(reps.mean()),
            "sd": self.sd,
            "min": float(reps.min()),
            "max": float(reps.max()),
        }

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "lower": self.lower,
            "upper": self.upper,
            "level": self.level,
            "replicates": self.summary(),
            "failures": [{"replicate": i, "error": msg} for i, msg in self.failures],
            "warnings": list(self.warnings),
        }


def bootstrap(data, estimator: EstimatorConfig, config: BootstrapConfig) -> BootstrapResult:
    """Percentile interval at ``(1 - level) / 2`` and ``1 - (1 - level) / 2``.

    Replicates whose estimator fails are recorded and dropped; more than 10%
    failures raises :class:`BootstrapError`.
    """
    point = point_estimate(data, estimator)

    def one(index: int):
        rng = _replicate_rng(config.seed, index)
        try:
            return index, point_estimate(resample(data, rng), estimator), None
        except (ConvergenceError, ValueError, ZeroDivisionError, TableError) as err:
            return index, None, f"{type(err).__name__}: {err}"

    indices = range(config.replications)
    if config.workers > 1:
        with ThreadPoolExecutor(max_workers=config.workers) as pool:
            outcomes = list(pool.map(one, indices))
    else:
        outcomes = [one(i) for i in indices]
    outcomes.sort(key=lambda item: item[0])

    values = np.array([v for _, v, err in outcomes if err is None], dtype=float)
    failures = tuple((i, err) for i, _, err in outcomes if err is not None)
    if len(failures) > MAX_FAILURE_SHARE * config.replications or values.size < 2:
        raise BootstrapError(
            f"{len(failures)} of {config.replications} replicates failed; first: "
            f"{failures[0][1] if failures else 'n/a'}"
        )
    alpha = 1.0 - config.level
    lower, upper = np.quantile(values, [alpha / 2.0, 1.0 - alpha / 2.0])
    lower, upper = float(lower), float(upper)
    warnings = ()
    if values.min() <= point <= values.max() and not lower <= point <= upper:
        # reported, never clipped
        warnings = (f"point estimate {point} outside percentile interval ({lower}, {upper})",)
    return BootstrapResult(point, lower, upper, config.level, values, failures, warnings)
