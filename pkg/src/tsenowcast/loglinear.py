"""Poisson log-linear models for three-sample inclusion tables.

Cells are ``(period, pattern)`` pairs where ``period`` is 0 for the base period
and 1 for the current one. Terms are strings over the letters ``A``, ``B``,
``C`` (sample membership) and ``T`` (current period): ``"AB"`` is the A-B
interaction, ``"TA"`` the current-period shift of the A effect. Coding is
dummy coding with level 0 as reference, so a term's column is the product of
its indicator bits.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import gammaln, xlogy

from .tables import ALL_PATTERNS

__all__ = [
    "FAMILIES",
    "PERIOD_TERMS",
    "ModelSpec",
    "DesignMatrix",
    "FitResult",
    "IdentifiabilityError",
    "ConvergenceError",
    "StructuralZeroError",
    "normalize_family",
    "design_matrix",
    "fit_poisson",
    "fit_cells",
    "poisson_loglik",
    "poisson_deviance",
    "ipf_fit",
    "information_criteria",
    "extrapolate_cell",
]

FAMILIES: dict[str, tuple[str, ...]] = {
    "saturated": ("A", "B", "C", "AB", "AC", "BC"),
    "2pd-I": ("A", "B", "C", "AC", "BC"),
    "2pd-II": ("A", "B", "C", "AB", "BC"),
    "2pd-III": ("A", "B", "C", "AB", "AC"),
    "1pd-I": ("A", "B", "C", "BC"),
    "1pd-II": ("A", "B", "C", "AC"),
    "1pd-III": ("A", "B", "C", "AB"),
    "independence": ("A", "B", "C"),
}

# period term name -> design term
PERIOD_TERMS = {"shift": "T", "A-shift": "TA", "B-shift": "TB"}

_BASE_ORDER = ("A", "B", "C", "AB", "AC", "BC")
_ALIASES = {"indep": "independence", "sat": "saturated"}

DIVERGENCE_LIMIT = 30.0


class IdentifiabilityError(ValueError):
    """The design matrix is rank deficient for the requested cells."""


class ConvergenceError(RuntimeError):
    """An iterative fit did not converge."""


class StructuralZeroError(ConvergenceError):
    """Parameters diverged, usually because a sufficient statistic is zero."""


def normalize_family(name: str) -> str:
    """Map user spellings (``2pd-i``, ``indep``) onto canonical family names."""
    key = str(name).strip()
    low = key.lower()
    if low in _ALIASES:
        return _ALIASES[low]
    for fam in FAMILIES:
        if fam.lower() == low:
            return fam
    raise ValueError(f"unknown model family {name!r}; choose from {', '.join(FAMILIES)}")


@dataclass(frozen=True)
class ModelSpec:
    """Log-linear terms of a model; the intercept is always present.

    Build the named families with :meth:`family_spec`. A spec with ``family=None``
    is a custom term set (used e.g. for two-sample models over patterns of
    length two).
    """

    base_terms: tuple[str, ...]
    period_terms: tuple[str, ...] = ()
    family: str | None = None

    def __post_init__(self):
        for term in self.base_terms:
            if term not in _BASE_ORDER:
                raise ValueError(f"unsupported term {term!r}")
        for term in self.period_terms:
            if term not in PERIOD_TERMS:
                raise ValueError(f"unknown period term {term!r}")
        if self.family is not None and set(FAMILIES[self.family]) != set(self.base_terms):
            raise ValueError(f"terms do not match family {self.family}")
        object.__setattr__(
            self, "base_terms", tuple(t for t in _BASE_ORDER if t in self.base_terms)
        )
        object.__setattr__(
            self, "period_terms", tuple(t for t in PERIOD_TERMS if t in self.period_terms)
        )

    @classmethod
    def family_spec(cls, name: str, period_terms: Sequence[str] = ()) -> "ModelSpec":
        fam = normalize_family(name)
        return cls(FAMILIES[fam], tuple(period_terms), fam)

    @property
    def terms(self) -> tuple[str, ...]:
        return self.base_terms + tuple(PERIOD_TERMS[t] for t in self.period_terms)

    @property
    def names(self) -> tuple[str, ...]:
        return ("mu",) + self.terms

    def generating_class(self) -> list[str]:
        """Maximal terms; their margins are the sufficient statistics."""
        terms = list(self.terms)
        return [t for t in terms if not any(t != u and set(t) < set(u) for u in terms)]


def _bits(period: int, pattern: str) -> dict[str, int]:
    bits = {"T": int(period)}
    for letter, ch in zip("ABC", pattern):
        bits[letter] = int(ch)
    return bits


def _row(spec: ModelSpec, period: int, pattern: str) -> np.ndarray:
    bits = _bits(period, pattern)
    row = [1.0]
    for term in spec.terms:
        try:
            row.append(float(np.prod([bits[ch] for ch in term])))
        except KeyError:
            raise ValueError(f"term {term} not defined for pattern {pattern!r}") from None
    return np.array(row)


@dataclass(frozen=True)
class DesignMatrix:
    spec: ModelSpec
    cells: tuple[tuple[int, str], ...]
    matrix: np.ndarray

    @property
    def names(self) -> tuple[str, ...]:
        return self.spec.names

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


def design_matrix(spec: ModelSpec, cells: Sequence[tuple[int, str]]) -> DesignMatrix:
    """0/1 design for ``cells``; raises when the columns are not of full rank."""
    cells = tuple((int(p), str(k)) for p, k in cells)
    if not cells:
        raise ValueError("no cells to fit")
    for _, key in cells:
        if "+" in key:
            raise ValueError(f"pattern {key} is not fully specified")
    X = np.vstack([_row(spec, p, k) for p, k in cells])
    if X.shape[1] > X.shape[0]:
        raise IdentifiabilityError(
            f"unidentified model for these cells: {X.shape[1]} parameters, {X.shape[0]} cells"
        )
    _, R, _ = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    rank = int(np.sum(diag > 1e-10 * diag.max()))
    if rank < X.shape[1]:
        raise IdentifiabilityError(
            f"unidentified model for these cells: rank {rank} < {X.shape[1]} parameters"
        )
    return DesignMatrix(spec, cells, X)


def poisson_deviance(y: np.ndarray, mu: np.ndarray) -> float:
    return float(2.0 * np.sum(xlogy(y, y) - xlogy(y, mu) - (y - mu)))


def poisson_loglik(y: np.ndarray, mu: np.ndarray) -> float:
    """Full Poisson log-likelihood, including the ``-log y!`` constant."""
    return float(np.sum(xlogy(y, mu) - mu - gammaln(y + 1.0)))


@dataclass(frozen=True)
class FitResult:
    """Maximum likelihood fit of a log-linear model.

    ``fitted`` covers every pattern (including ``000``) of every period that
    appears in the fitted cells; cells outside the design rows are
    extrapolated from the parameters.
    """

    design: DesignMatrix
    counts: np.ndarray
    params: np.ndarray
    fitted_rows: np.ndarray
    fitted: dict[tuple[int, str], float]
    loglik: float
    deviance: float
    df: int
    converged: bool
    iterations: int
    deviance_trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def spec(self) -> ModelSpec:
        return self.design.spec

    @property
    def names(self) -> tuple[str, ...]:
        return self.design.names

    def param(self, name: str) -> float:
        """Coefficient by term name; terms absent from the model are 0."""
        names = self.names
        return float(self.params[names.index(name)]) if name in names else 0.0

    @property
    def nobs(self) -> int:
        return len(self.counts)


def _all_patterns(width: int) -> tuple[str, ...]:
    if width == 3:
        return ALL_PATTERNS
    return tuple(format(i, f"0{width}b") for i in reversed(range(2**width)))


def _extrapolate_all(spec, cells, params) -> dict[tuple[int, str], float]:
    out = {}
    width = len(cells[0][1])
    for period in sorted({p for p, _ in cells}):
        for key in _all_patterns(width):
            out[(period, key)] = float(np.exp(_row(spec, period, key) @ params))
    return out


def fit_poisson(
    design: DesignMatrix,
    counts,
    tol: float = 1e-10,
    max_iter: int = 100,
    start: np.ndarray | None = None,
    score_tol: float = 1e-10,
    step_tol: float = 1e-6,
) -> FitResult:
    """IRLS (Newton on the canonical log link) with step halving.

    Iteration stops when the deviance changes by less than
    ``tol * max(1, deviance)`` and every sufficient statistic is matched to
    ``score_tol`` relative. The second test guards against stopping on
    deviance changes that are below floating-point resolution, and both
    deviance tests allow for that resolution. Parameters beyond +-30 on the
    log scale are reported as a structural zero; requiring the last Newton
    step to be below ``step_tol`` keeps a diverging direction moving until it
    crosses that limit instead of stalling at a tiny fitted value.
    """
    X = design.matrix
    y = np.asarray(counts, dtype=float)
    if y.shape != (X.shape[0],):
        raise ValueError(f"expected {X.shape[0]} counts, got {y.shape}")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("counts must be finite and nonnegative")

    if start is None:
        # least squares on log(y + 0.5) is a safe, positive starting point
        theta = np.linalg.lstsq(X, np.log(y + 0.5), rcond=None)[0]
    else:
        theta = np.array(start, dtype=float)
    eta = X @ theta
    mu = np.exp(eta)
    dev = poisson_deviance(y, mu)
    trace = [dev]
    converged = False
    it = 0
    # deviance is computed from terms of size ~y*log(y); ignore increases below that resolution
    slack = 1e-12 * (1.0 + float(y.sum()))
    score = X.T @ (y - mu)
    for it in range(1, max_iter + 1):
        info = X.T @ (X * mu[:, None])
        try:
            with warnings.catch_warnings():
                # near-singular information only occurs while a parameter diverges
                warnings.simplefilter("ignore", linalg.LinAlgWarning)
                step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            step = linalg.lstsq(info, score)[0]
        factor = 1.0
        for _ in range(40):
            cand = theta + factor * step
            mu_c = np.exp(X @ cand)
            dev_c = poisson_deviance(y, mu_c) if np.all(np.isfinite(mu_c)) else np.inf
            if dev_c <= dev + slack:
                break
            factor *= 0.5
        else:
            raise ConvergenceError("step halving failed to reduce the deviance")
        change = dev - dev_c
        theta, mu, dev = cand, mu_c, dev_c
        trace.append(dev)
        bad = np.abs(theta) > DIVERGENCE_LIMIT
        if np.any(bad):
            names = [design.names[j] for j in np.flatnonzero(bad)]
            raise StructuralZeroError(
                "parameters diverging (structural zero?) for "
                + ", ".join(names)
                + f"; sufficient statistics {dict(zip(design.names, X.T @ y))}"
            )
        score = X.T @ (y - mu)
        mismatch = np.max(np.abs(score) / np.maximum(1.0, X.T @ y))
        moved = factor * float(np.max(np.abs(step)))
        if abs(change) < tol * max(1.0, abs(dev)) + slack and mismatch < score_tol and moved < step_tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations (deviance {dev})")

    return FitResult(
        design=design,
        counts=y,
        params=theta,
        fitted_rows=mu,
        fitted=_extrapolate_all(design.spec, design.cells, theta),
        loglik=poisson_loglik(y, mu),
        deviance=dev,
        df=X.shape[0] - X.shape[1],
        converged=True,
        iterations=it,
        deviance_trace=tuple(trace),
    )


def fit_cells(spec: ModelSpec, cells, counts, **options) -> FitResult:
    """Shorthand for ``fit_poisson(design_matrix(spec, cells), counts)``."""
    return fit_poisson(design_matrix(spec, cells), counts, **options)


def ipf_fit(
    spec: ModelSpec,
    cells: Sequence[tuple[int, str]],
    counts,
    tol: float = 1e-13,
    max_iter: int = 200_000,
) -> dict[tuple[int, str], float]:
    """Iterative proportional fitting over the cells present.

    Cells absent from ``cells`` (the ``000`` cells, for instance) are treated
    as structural zeros. Each margin of the model's generating class is
    matched in turn. Unobserved cells are then extrapolated by solving the
    linear system ``log(fitted) = X theta``, which is exact for a converged
    hierarchical fit. Returns the same mapping as ``FitResult.fitted``.
    """
    design = design_matrix(spec, cells)
    y = np.asarray(counts, dtype=float)
    bits = [_bits(p, k) for p, k in design.cells]

    groupings = []
    for term in spec.generating_class() or []:
        labels = [tuple(b[ch] for ch in term) for b in bits]
        uniq = sorted(set(labels))
        index = np.array([uniq.index(lab) for lab in labels])
        observed = np.bincount(index, weights=y, minlength=len(uniq))
        if np.any(observed <= 0):
            raise ValueError(f"zero margin for term {term}")
        groupings.append((index, observed))
    if y.sum() <= 0:
        raise ValueError("zero margin for the total")

    m = np.full(len(y), y.sum() / len(y))
    if not groupings:
        fitted_rows = m
    else:
        for _ in range(max_iter):
            for index, observed in groupings:
                m = m * (observed / np.bincount(index, weights=m, minlength=len(observed)))[index]
            worst = max(
                np.max(np.abs(np.bincount(idx, weights=m, minlength=len(obs)) - obs) / obs)
                for idx, obs in groupings
            )
            if worst < tol:
                break
        else:
            raise ConvergenceError("IPF did not converge")
        fitted_rows = m
    theta = np.linalg.lstsq(design.matrix, np.log(fitted_rows), rcond=None)[0]
    return _extrapolate_all(spec, design.cells, theta)


def information_criteria(fit) -> dict[str, float]:
    """AIC and BIC from the Poisson log-likelihood.

    Accepts a :class:`FitResult` or any object with ``loglik``, ``params`` (or
    ``p``) and ``nobs`` attributes.
    """
    p = getattr(fit, "p", None)
    if p is None:
        p = len(fit.params)
    loglik = float(fit.loglik)
    nobs = int(fit.nobs)
    return {"aic": -2.0 * loglik + 2.0 * p, "bic": -2.0 * loglik + p * float(np.log(nobs))}


def extrapolate_cell(fit: FitResult, period: int, pattern: str) -> float:
    """Expected count of any fully specified cell under the fitted model."""
    if "+" in pattern:
        raise ValueError(f"pattern {pattern} is not fully specified")
    return float(np.exp(_row(fit.spec, period, pattern) @ fit.params))
