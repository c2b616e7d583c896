"""Poisson log-linear regression with log offsets, fitted by IRLS.

The age-period-cohort design is structurally collinear (age = period -
cohort), so the fitter detects rank deficiency up front, drops aliased
columns, and reports them.  Fitted means on the observed range are invariant
to which dependent column is dropped, which is what makes the APC esimates
usable despite the identifiability problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import gammaln, xlogy

from .errors import ConvergenceError

log = logging.getLogger(__name__)

MAX_ITER = 50
DEVIANCE_RTOL = 1e-10
SINGULAR_RTOL = 1e-10
MAX_HALVINGS = 10


@dataclass(frozen=True)
class DesignMatrix:
    """Dense design matrix with column labels; no intercept column."""

    matrix: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2:
            raise ValueError("design matrix must be 2-D")
        if m.shape[1] != len(self.labels):
            raise ValueError(
                f"{len(self.labels)} labels for {m.shape[1]} columns"
            )
        if not np.all(np.isfinite(m)):
            raise ValueError("design matrix entries must be finite")
        object.__setattr__(self, "matrix", m)

    @property
    def shape(self) -> tuple[int, int]:
        return self.matrix.shape


@dataclass(frozen=True)
class GlmFit:
    """Result of a Poisson fit: coefficients over retained columns.

    ``coef`` is full length with zeros in aliased positions so it can be
    used directly against the original design; ``aliased`` lists the dropped
    labels and ``retained`` their complement as column indices.
    """

    labels: tuple[str, ...]
    coef: np.ndarray
    retained: np.ndarray
    aliased: tuple[str, ...]
    covariance: np.ndarray
    deviance: float
    loglik: float
    iterations: int
    step_norm: float
    converged: bool
    n_excluded_rows: int = 0
    diagnostics: dict = field(default_factory=dict)

    def coefficient(self, label: str) -> float:
        return float(self.coef[self.labels.index(label)])


def poisson_log_likelihood(y: np.ndarray, mu: np.ndarray) -> float:
    """Sum of y*log(mu) - mu - log(y!); -inf when mu = 0 meets y > 0."""
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any((mu == 0) & (y > 0)):
        return -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = xlogy(y, mu) - mu - gammaln(y + 1.0)
    return float(np.sum(terms))


def log_likelihood(fit: GlmFit, X: DesignMatrix, y, offset) -> float:
    """Poisson log likelihood of ``fit`` on the given rows."""
    mu = predict_mean(fit, X, offset)
    return poisson_log_likelihood(np.asarray(y, dtype=float), mu)


def _deviance(y: np.ndarray, mu: np.ndarray) -> float:
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = 2.0 * np.sum(xlogy(y, y / mu) - (y - mu))
    return float(dev)


def _rank_and_pivots(X: np.ndarray) -> tuple[int, np.ndarray]:
    s = scipy.linalg.svd(X, compute_uv=False, check_finite=False)
    if s.size == 0 or s[0] == 0.0:
        return 0, np.arange(X.shape[1])
    rank = int(np.sum(s > SINGULAR_RTOL * s[0]))
    _, _, piv = scipy.linalg.qr(X, mode="economic", pivoting=True, check_finite=False)
    return rank, piv


def fit_poisson(
    X: DesignMatrix,
    y,
    offset,
    *,
    force_drop: tuple[str, ...] = (),
    warn_excluded: bool = True,
    retained: np.ndarray | None = None,
    beta0: np.ndarray | None = None,
) -> GlmFit:
    """Fit a Poisson log-linear model with a known additive log offset.

    Rows whose offset is -inf (zero person-years or zero expected-share
    multiplier) are excluded with a warning.  Rank deficiency is resolved by
    a pivoted orthogonal decomposition: columns beyond the numerical rank
    (singular values below 1e-10 of the largest) are dropped and reported as
    aliased.  Deviance increases trigger step halving; three consecutive
    damped increases raise :class:`ConvergenceError` with the trace.

    ``force_drop`` removes the named columns before rank detection - used to
    verify that the fitted means do not depend on which aliased column of a
    collinear block is dropped.  ``retained`` (column indices) skips rank
    detection and ``beta0`` (full-length coefficients) warm starts the
    iteration; both are for repeated fits on resampled data with an
    unchanged design.
    """
    y = np.asarray(y, dtype=float)
    offset = np.asarray(offset, dtype=float)
    if y.shape != (X.shape[0],) or offset.shape != (X.shape[0],):
        raise ValueError("y and offset must match the design's row count")
    if np.any(y < 0) or not np.all(np.isfinite(y)):
        raise ValueError("counts must be finite and nonnegative")
    if np.any(np.isnan(offset)) or np.any(offset == np.inf):
        raise ValueError("offsets must be finite or -inf")

    keep_rows = offset > -np.inf
    n_excluded = int(np.sum(~keep_rows))
    if n_excluded and warn_excluded:
        log.warning(
            "excluding %d row(s) with zero offset multiplier (log offset -inf) from the fit",
            n_excluded,
        )
    Xm = X.matrix[keep_rows]
    ym = y[keep_rows]
    om = offset[keep_rows]
    if Xm.shape[0] == 0:
        raise ValueError("no usable rows remain after excluding -inf offsets")

    if retained is None:
        forced_keep = np.array([lab not in force_drop for lab in X.labels], dtype=bool)
        candidates = np.flatnonzero(forced_keep)
        rank, piv = _rank_and_pivots(Xm[:, candidates])
        retained = np.sort(candidates[piv[:rank]])
    else:
        retained = np.asarray(retained, dtype=np.int64)
    aliased = tuple(
        X.labels[j] for j in range(X.shape[1]) if j not in set(retained.tolist())
    )
    Xr = Xm[:, retained]
    p = Xr.shape[1]
    if p == 0:
        raise ValueError("design has rank zero")

    if beta0 is not None:
        beta = np.asarray(beta0, dtype=float)[retained]
        eta = Xr @ beta + om
        mu = np.exp(eta)
        dev = _deviance(ym, mu)
    else:
        # Working response from mu = y + 0.5 with beta implicitly zero; the
        # reference deviance stays +inf so the first solve is never damped
        # against the near-saturated start.
        mu = ym + 0.5
        eta = np.log(mu)
        beta = np.zeros(p)
        dev = np.inf
    trace = [dev]
    consecutive_bad = 0
    step_norm = np.inf
    converged = False
    iterations = 0

    for iterations in range(1, MAX_ITER + 1):
        w = mu
        z = (eta - om) + (ym - mu) / mu
        xtw = Xr.T * w
        xtwx = xtw @ Xr
        xtwz = xtw @ z
        try:
            beta_new = scipy.linalg.solve(xtwx, xtwz, assume_a="pos", check_finite=False)
        except scipy.linalg.LinAlgError:
            beta_new, *_ = scipy.linalg.lstsq(np.sqrt(w)[:, None] * Xr, np.sqrt(w) * z)

        halvings = 0
        while True:
            with np.errstate(over="ignore"):
                eta_new = Xr @ beta_new + om
                mu_new = np.exp(eta_new)
            dev_new = _deviance(ym, mu_new)
            if np.isfinite(dev_new) and dev_new <= dev + 1e-12 * (abs(dev) + 1.0):
                break
            if halvings >= MAX_HALVINGS:
                break
            beta_new = 0.5 * (beta_new + beta)
            halvings += 1

        trace.append(dev_new)
        if not np.isfinite(dev_new) or dev_new > dev + 1e-8 * (abs(dev) + 1.0):
            consecutive_bad += 1
            if consecutive_bad >= 3:
                raise ConvergenceError(
                    "Poisson fit diverged: deviance increased on 3 consecutive damped steps",
                    trace=trace,
                )
        else:
            consecutive_bad = 0

        step_norm = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        beta, eta, mu, dev = beta_new, eta_new, mu_new, dev_new
        if step_norm < DEVIANCE_RTOL:
            converged = True
            break

    xtwx = (Xr.T * mu) @ Xr
    try:
        cov_r = scipy.linalg.inv(xtwx)
    except scipy.linalg.LinAlgError:
        cov_r = np.linalg.pinv(xtwx)
    cov_r = 0.5 * (cov_r + cov_r.T)

    coef = np.zeros(X.shape[1])
    coef[retained] = beta
    return GlmFit(
        labels=X.labels,
        coef=coef,
        retained=retained,
        aliased=aliased,
        covariance=cov_r,
        deviance=dev,
        loglik=poisson_log_likelihood(ym, mu),
        iterations=iterations,
        step_norm=float(step_norm),
        converged=converged,
        n_excluded_rows=n_excluded,
    )


def predict_mean(fit: GlmFit, X: DesignMatrix, offset) -> np.ndarray:
    """Expected counts exp(X @ coef + offset); aliased columns contribute 0."""
    if X.labels != fit.labels:
        raise ValueError(
            "design columns do not match the fitted model "
            f"(expected {fit.labels}, got {X.labels})"
        )
    offset = np.asarray(offset, dtype=float)
    if offset.shape != (X.shape[0],):
        raise ValueError("offset length must match the design's row count")
    return np.exp(X.matrix @ fit.coef + offset)
