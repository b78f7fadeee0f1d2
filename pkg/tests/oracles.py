"""Independent reference computations used by the tests.

Nothing here calls the package's fitting code: designs are rebuilt from
scratch and likelihoods are maximized with a derivative-free optimizer.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

PATTERNS = ("111", "110", "101", "011", "100", "010", "001")
ALL = PATTERNS + ("000",)
STAGE_B_ROWS = ("111", "110", "101", "100", "011", "010")


def random_counts(rng, low=20, high=2000, size=7):
    return [int(v) for v in rng.integers(low, high, size)]


def closed_form_m000(c):
    n111, n110, n101, n011, n100, n010, n001 = map(float, c)
    return n111 * n100 * n010 * n001 / (n110 * n101 * n011)


def stage_b_closed_form(base, agg):
    """Saturated stage-b nowcast from margins only.

    ``base`` holds the seven base counts in canonical order, ``agg`` the
    current aggregates ``(11+, 10+, 01+)``. Returns ``(N, m000, m001)``.
    """
    b = dict(zip(PATTERNS, map(float, base)))
    n11, n10, n01 = map(float, agg)
    m000_0 = closed_form_m000(base)
    b11, b10, b01 = b["111"] + b["110"], b["101"] + b["100"], b["011"] + b["010"]
    m00_1 = (n10 * n01 / n11) * b11 * (b["001"] + m000_0) / (b10 * b01)
    m000_1 = m00_1 * m000_0 / (b["001"] + m000_0)
    return n11 + n10 + n01 + m00_1, m000_1, m00_1 - m000_1


def stage_a_identity(base, n1_current):
    base = list(map(float, base))
    n_tse = sum(base) + closed_form_m000(base)
    n1_base = base[0] + base[1] + base[2] + base[4]
    return n_tse * n1_current / n1_base


def _stacked_row(period, pattern):
    a, b, c = (int(ch) for ch in pattern)
    t = int(period)
    return [1.0, a, b, c, a * b, a * c, b * c, t, t * a, t * b]


def observed_likelihood_nowcast(base, agg, restarts=3):
    """Maximize the observed-data Poisson likelihood of the saturated
    stage-b stacked model with Powell's method; return the nowcast N.

    The parameters are whitened with the information matrix at a crude
    starting point so that the search directions are well scaled.
    """
    by = np.asarray(base, dtype=float)
    ay = np.asarray(agg, dtype=float)
    y = np.concatenate([by, ay])
    X = np.array([_stacked_row(0, k) for k in PATTERNS] + [_stacked_row(1, k) for k in STAGE_B_ROWS])
    start = np.concatenate([by, np.repeat(ay / 2.0, 2)])
    theta0 = np.linalg.lstsq(X, np.log(start), rcond=None)[0]
    chol = np.linalg.cholesky(X.T @ (X * start[:, None]))
    back = np.linalg.inv(chol).T
    logy = np.log(y)

    def objective(z):
        eta = X @ (theta0 + back @ z)
        logm = np.concatenate([eta[:7], np.logaddexp(eta[7:13:2], eta[8:13:2])])
        d = logm - logy
        # Poisson deviance / 2, written to stay accurate near the optimum
        return float(np.sum(y * (np.expm1(d) - d)))

    z = np.zeros(X.shape[1])
    for _ in range(restarts):
        res = minimize(objective, z, method="Powell", options={"xtol": 1e-8, "ftol": 1e-13, "maxfev": 50_000})
        done = np.allclose(res.x, z, atol=1e-8, rtol=0)
        z = res.x
        if done:
            break
    theta = theta0 + back @ z
    return float(sum(np.exp(np.array(_stacked_row(1, k)) @ theta) for k in ALL))


def independence_nll_fit(counts):
    """Derivative-free Poisson fit of the independence model on 7 cells."""
    X = np.array([[1.0] + [int(ch) for ch in k] for k in PATTERNS])
    y = np.asarray(counts, dtype=float)

    def nll(theta):
        eta = X @ theta
        return float(np.sum(np.exp(eta) - y * eta))

    theta = np.array([np.log(y.mean()), 0.0, 0.0, 0.0])
    opts = {"xatol": 1e-13, "fatol": 1e-15, "maxiter": 100_000, "maxfev": 100_000}
    for _ in range(2):
        theta = minimize(nll, theta, method="Nelder-Mead", options=opts).x
    return float(np.exp(theta[0]))
