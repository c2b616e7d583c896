"""The four screening-effect estimators on the split analysis table.

Method 0 is the diluted baseline (observed vs expected post-invitation
deaths without separating diagnosis timing).  Method 1 compares observed
post-invitation-diagnosis deaths to a standardized expectation.  Method 2,
the recommended estimator, is a single Poisson regression over all three
strata types with expected-share offsets.  Method 3 maximizes the joint
likelihood of the mortality table and the historic lag histogram, warm
started from Method 2.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import scipy.optimize

from .errors import ConvergenceError, EstimationError, InputError
from .glm import DesignMatrix, GlmFit, fit_poisson, poisson_log_likelihood, predict_mean
from .lagmodel import LagHistogram, LagParameters, LagSurvival
from .registry import MortalityTable, TableColumns
from .splines import KnotSet, knots_from_data, natural_basis

log = logging.getLogger(__name__)

DEFAULT_DF = 5
MLE_MAX_ITER = 500
MLE_GRAD_RTOL = 1e-6
_ETA_CAP = 690.0  # keeps exp() finite during line searches


class Method(str, Enum):
    M0 = "M0"
    M1 = "M1"
    M2 = "M2"
    M3 = "M3"


@dataclass(frozen=True)
class ModelSpec:
    """Linear-predictor layout: three spline blocks, region indicators, and
    optionally the screening indicator.  No global intercept - the region
    block carries the level."""

    year_knots: KnotSet
    cohort_knots: KnotSet
    age_knots: KnotSet
    regions: tuple[str, ...]
    include_screening: bool

    SCREENING_LABEL = "screened"

    @classmethod
    def from_columns(
        cls, cols: TableColumns, include_screening: bool, df: int = DEFAULT_DF
    ) -> "ModelSpec":
        present = sorted(set(cols.regions[i] for i in np.unique(cols.region_index)))
        return cls(
            year_knots=knots_from_data(cols.year, df),
            cohort_knots=knots_from_data(cols.cohort, df),
            age_knots=knots_from_data(cols.age, df),
            regions=tuple(present),
            include_screening=include_screening,
        )

    @property
    def labels(self) -> tuple[str, ...]:
        out = [f"year_ns{i + 1}" for i in range(self.year_knots.df)]
        out += [f"cohort_ns{i + 1}" for i in range(self.cohort_knots.df)]
        out += [f"age_ns{i + 1}" for i in range(self.age_knots.df)]
        out += [f"region={r}" for r in self.regions]
        if self.include_screening:
            out.append(self.SCREENING_LABEL)
        return tuple(out)

    def design(self, cols: TableColumns) -> DesignMatrix:
        blocks = [
            natural_basis(cols.year, self.year_knots),
            natural_basis(cols.cohort, self.cohort_knots),
            natural_basis(cols.age, self.age_knots),
        ]
        lookup = {name: j for j, name in enumerate(self.regions)}
        onehot = np.zeros((cols.n, len(self.regions)))
        for code, name in enumerate(cols.regions):
            rows = cols.region_index == code
            if not rows.any():
                continue
            if name not in lookup:
                raise InputError(f"region {name!r} was not present in the fitted data")
            onehot[rows, lookup[name]] = 1.0
        blocks.append(onehot)
        if self.include_screening:
            blocks.append(cols.scr[:, None])
        return DesignMatrix(np.hstack(blocks), self.labels)

    def to_dict(self) -> dict:
        return {
            "year_knots": self.year_knots.to_dict(),
            "cohort_knots": self.cohort_knots.to_dict(),
            "age_knots": self.age_knots.to_dict(),
            "regions": list(self.regions),
            "include_screening": self.include_screening,
        }


@dataclass(frozen=True)
class FullModelParams:
    """Joint-likelihood parameters: trend/region coefficients, log screening
    effect, and the whole-month lag probabilities."""

    design_labels: tuple[str, ...]
    coef: np.ndarray
    log_screening_effect: float
    lag: LagParameters


@dataclass
class EstimateResult:
    method: Method
    log_effect: float
    ci_low: float | None = None
    ci_high: float | None = None
    replicates: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)
    fit: GlmFit | None = field(default=None, repr=False, compare=False)
    model: ModelSpec | None = field(default=None, repr=False, compare=False)
    full_params: FullModelParams | None = field(default=None, repr=False, compare=False)
    replicate_table: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def screening_rate_ratio(self) -> float:
        return float(np.exp(self.log_effect))

    def to_dict(self) -> dict:
        out = {
            "method": self.method.value,
            "screening_rate_ratio": self.screening_rate_ratio,
            "log_effect": self.log_effect,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_replicates": None if self.replicates is None else int(self.replicates.size),
            "diagnostics": self.diagnostics,
        }
        return out


def _columns(table) -> TableColumns:
    return table.columns if isinstance(table, MortalityTable) else table


def _subset(cols: TableColumns, mask: np.ndarray) -> TableColumns:
    return TableColumns(
        year=cols.year[mask],
        cohort=cols.cohort[mask],
        age=cols.age[mask],
        region_index=cols.region_index[mask],
        regions=cols.regions,
        group=cols.group[mask],
        person_years=cols.person_years[mask],
        cases=cols.cases[mask],
        tsi=cols.tsi[mask],
        prop_target=cols.prop_target[mask],
    )


def month_indices(tsi: np.ndarray) -> np.ndarray:
    """Vectorized whole-month index of times since invitation (years)."""
    return np.maximum(0, np.ceil(12.0 * np.asarray(tsi, dtype=float) - 1e-9)).astype(np.int64)


def band_indices(bands: tuple[tuple[float, float], ...], ages: np.ndarray) -> np.ndarray:
    out = np.full(len(ages), -1, dtype=np.int64)
    for b, (lo, hi) in enumerate(bands):
        out[(ages >= lo) & (ages < hi)] = b
    if np.any(out < 0):
        bad = sorted(set(np.asarray(ages)[out < 0].tolist()))
        raise EstimationError(f"ages {bad} fall outside the configured lag age bands {list(bands)}")
    return out


def survival_values(lag: LagSurvival, delta_idx: np.ndarray, band_idx: np.ndarray) -> np.ndarray:
    """rho at whole-month deltas, truncating to 0 beyond the support."""
    rho = np.zeros(len(delta_idx), dtype=float)
    ok = delta_idx <= lag.max_months
    rho[ok] = lag.rho[band_idx[ok], delta_idx[ok]]
    return rho


def _log_offset(py: np.ndarray, prop: np.ndarray | None = None) -> np.ndarray:
    with np.errstate(divide="ignore"):
        off = np.log(py)
        if prop is not None:
            off = off + np.log(prop)
    return off


def _fit_trend_on_unscreened(
    cols: TableColumns,
    *,
    model: ModelSpec | None = None,
    design: DesignMatrix | None = None,
    warn: bool = True,
    glm_warm: GlmFit | None = None,
) -> tuple[ModelSpec, GlmFit, DesignMatrix]:
    none_mask = cols.group == TableColumns.GROUP_NONE
    if not none_mask.any():
        raise InputError("no unscreened strata to fit the baseline trend on")
    sub = _subset(cols, none_mask)
    if model is None:
        model = ModelSpec.from_columns(sub, include_screening=False)
    if design is None:
        design = model.design(sub)
    fit = fit_poisson(
        design,
        sub.cases,
        _log_offset(sub.person_years),
        warn_excluded=warn,
        retained=None if glm_warm is None else glm_warm.retained,
        beta0=None if glm_warm is None else glm_warm.coef,
    )
    if not fit.converged:
        raise ConvergenceError(
            "baseline trend fit did not converge within the iteration budget",
            trace=[fit.deviance],
        )
    return model, fit, design


def _require_screened(cols: TableColumns) -> np.ndarray:
    new_mask = cols.group == TableColumns.GROUP_POST_NEW
    if not new_mask.any():
        raise InputError(
            "table has no post-invitation strata: a screening effect cannot be "
            "estimated without screened data"
        )
    return new_mask


def estimate_method0(
    table, *, model=None, fit_design=None, pred_design=None, warn=True, glm_warm=None
) -> EstimateResult:
    """Diluted baseline: observed vs expected post-invitation deaths without
    separating diagnosis timing."""
    cols = _columns(table)
    new_mask = _require_screened(cols)
    old_mask = cols.group == TableColumns.GROUP_POST_OLD
    screened = _subset(cols, new_mask)
    if screened.person_years.sum() <= 0:
        raise InputError("screened strata carry no observation time")
    model, fit, fit_design = _fit_trend_on_unscreened(
        cols, model=model, design=fit_design, warn=warn, glm_warm=glm_warm
    )
    if pred_design is None:
        pred_design = model.design(screened)
    predicted = float(np.sum(predict_mean(fit, pred_design, _log_offset(screened.person_years))))
    observed = float(cols.cases[new_mask].sum() + cols.cases[old_mask].sum())
    if observed <= 0:
        raise EstimationError("no post-invitation deaths observed")
    log_effect = float(np.log(observed) - np.log(predicted))
    return EstimateResult(
        method=Method.M0,
        log_effect=log_effect,
        diagnostics={
            "observed": observed,
            "expected": predicted,
            "fit_deviance": fit.deviance,
            "fit_iterations": fit.iterations,
            "aliased": list(fit.aliased),
        },
        fit=fit,
        model=model,
    )


def estimate_method1(
    table, lag: LagSurvival, *, model=None, fit_design=None, pred_design=None, warn=True, glm_warm=None
) -> EstimateResult:
    """Standardized refined-mortality ratio: observed post-invitation-
    diagnosis deaths over their expectation under no screening effect.

    The expectation scales each stratum's predicted mortality by the
    complement of the age-band-specific survival proportion at the
    stratum's time since invitation, summed across age bands and strata.
    """
    cols = _columns(table)
    new_mask = _require_screened(cols)
    screened = _subset(cols, new_mask)
    model, fit, fit_design = _fit_trend_on_unscreened(
        cols, model=model, design=fit_design, warn=warn, glm_warm=glm_warm
    )
    if pred_design is None:
        pred_design = model.design(screened)
    mu = predict_mean(fit, pred_design, _log_offset(screened.person_years))
    deltas = month_indices(screened.tsi)
    bands = band_indices(lag.bands, screened.age)
    rho = survival_values(lag, deltas, bands)
    expected_new = float(np.sum(mu * (1.0 - rho)))
    if expected_new <= 0:
        raise InputError(
            "expected post-invitation-diagnosis mortality is zero: the lag "
            "distribution leaves no mass after these times since invitation"
        )
    observed = float(screened.cases.sum())
    if observed <= 0:
        raise EstimationError("no post-invitation-diagnosis deaths observed")
    log_effect = float(np.log(observed) - np.log(expected_new))
    return EstimateResult(
        method=Method.M1,
        log_effect=log_effect,
        diagnostics={
            "observed": observed,
            "expected": expected_new,
            "fit_deviance": fit.deviance,
            "fit_iterations": fit.iterations,
            "aliased": list(fit.aliased),
        },
        fit=fit,
        model=model,
    )


def estimate_method2(table, *, model=None, design=None, warn=True, glm_warm=None) -> EstimateResult:
    """Refined-mortality offset regression (the recommended estimator).

    One joint Poisson fit over all three strata types with offset
    log(person_years) + log(prop_target) and a screening indicator on the
    post-invitation-diagnosis strata; the effect is the exponential of the
    indicator's coefficient.
    """
    cols = _columns(table)
    _require_screened(cols)
    if model is None:
        model = ModelSpec.from_columns(cols, include_screening=True)
    if design is None:
        design = model.design(cols)
    offset = _log_offset(cols.person_years, cols.prop_target)
    usable = offset > -np.inf
    if not np.any(cols.scr[usable] > 0):
        raise InputError(
            "all post-invitation-diagnosis strata are excluded (zero offset "
            "multiplier or person-years); no screening effect is estimable"
        )
    if cols.cases[usable & (cols.scr > 0)].sum() <= 0:
        raise EstimationError("no post-invitation-diagnosis deaths observed")
    fit = fit_poisson(
        design,
        cols.cases,
        offset,
        warn_excluded=warn,
        retained=None if glm_warm is None else glm_warm.retained,
        beta0=None if glm_warm is None else glm_warm.coef,
    )
    if not fit.converged:
        raise ConvergenceError(
            "offset regression did not converge within the iteration budget",
            trace=[fit.deviance],
        )
    if ModelSpec.SCREENING_LABEL in fit.aliased:
        raise InputError("screening indicator is aliased; screened strata carry no information")
    log_effect = fit.coefficient(ModelSpec.SCREENING_LABEL)
    return EstimateResult(
        method=Method.M2,
        log_effect=log_effect,
        diagnostics={
            "fit_deviance": fit.deviance,
            "fit_iterations": fit.iterations,
            "aliased": list(fit.aliased),
            "excluded_rows": fit.n_excluded_rows,
            "offset_note": "log person-years plus log expected-share multiplier",
        },
        fit=fit,
        model=model,
    )


class _LagFreeParams:
    """Unconstrained log-ratio coordinates over the positive-count lag bins.

    Zero-count bins stay pinned at probability zero (their multinomial
    maximum likelihood value), so the joint optimum reduces exactly to the
    empirical proportions when the mortality data carries no lag
    information.
    """

    def __init__(self, hist: LagHistogram):
        self.bands = hist.bands
        self.max_months = hist.max_months
        self.support = [np.flatnonzero(hist.counts[b] > 0) for b in range(hist.n_bands)]
        for b, sup in enumerate(self.support):
            if sup.size == 0:
                lo, hi = hist.bands[b]
                raise EstimationError(f"age band [{lo}, {hi}) has no recorded deaths")
        self.counts = hist.counts
        self.sizes = [s.size for s in self.support]
        self.n_free = int(sum(s - 1 for s in self.sizes))

    def z_start(self) -> np.ndarray:
        chunks = []
        for b, sup in enumerate(self.support):
            p = self.counts[b, sup].astype(float)
            logp = np.log(p / p.sum())
            chunks.append(logp[:-1] - logp[-1])
        return np.concatenate(chunks) if chunks else np.zeros(0)

    def probs(self, z: np.ndarray) -> np.ndarray:
        out = np.zeros((len(self.bands), self.max_months))
        pos = 0
        for b, sup in enumerate(self.support):
            k = self.sizes[b] - 1
            zb = np.concatenate([z[pos : pos + k], [0.0]])
            pos += k
            zb = zb - zb.max()
            e = np.exp(zb)
            out[b, sup] = e / e.sum()
        return out

    def grad_z(self, grad_p: np.ndarray, probs: np.ndarray) -> np.ndarray:
        chunks = []
        for b, sup in enumerate(self.support):
            p = probs[b, sup]
            g = grad_p[b, sup]
            inner = float(p @ g)
            chunks.append((p * (g - inner))[:-1])
        return np.concatenate(chunks) if chunks else np.zeros(0)


@dataclass
class _JointProblem:
    """Pieces of the joint likelihood shared by every objective evaluation."""

    X: np.ndarray  # included rows x retained non-screening columns
    y: np.ndarray
    eta_base: np.ndarray  # log person-years
    is_new: np.ndarray  # bool per included row
    is_post: np.ndarray
    band: np.ndarray  # band per included row (-1 for unscreened)
    delta: np.ndarray  # month index per included row (0 for unscreened)
    lagfree: _LagFreeParams
    hist_counts: np.ndarray
    include_screening: bool

    def unpack(self, theta):
        p = self.X.shape[1]
        beta = theta[:p]
        if self.include_screening:
            s = theta[p]
            z = theta[p + 1 :]
        else:
            s = 0.0
            z = theta[p:]
        return beta, s, z

    def neg_loglik_and_grad(self, theta):
        beta, s, z = self.unpack(theta)
        lf = self.lagfree
        probs = lf.probs(z)
        heads = np.cumsum(probs, axis=1)
        tails = np.cumsum(probs[:, ::-1], axis=1)[:, ::-1]
        M = lf.max_months

        f = np.ones(self.y.size)
        old = self.is_post & ~self.is_new
        new = self.is_new
        d_old = self.delta[old]
        d_new = self.delta[new]
        b_old = self.band[old]
        b_new = self.band[new]
        # P(lag >= d) as a direct tail sum; P(lag < d) as a direct head sum.
        f[old] = np.where(d_old <= 1, 1.0, tails[b_old, np.clip(d_old, 1, M) - 1])
        f[new] = heads[b_new, np.clip(d_new, 2, M + 1) - 2]

        with np.errstate(divide="ignore"):
            lnf = np.log(f)
        eta = self.X @ beta + self.eta_base + lnf
        if self.include_screening:
            eta = eta + s * new
        mu = np.exp(np.minimum(eta, _ETA_CAP))
        pois = float(self.y @ eta - mu.sum())
        with np.errstate(divide="ignore", invalid="ignore"):
            logp_sup = [np.log(probs[b, sup]) for b, sup in enumerate(lf.support)]
        mult = float(
            sum(self.hist_counts[b, sup] @ logp_sup[b] for b, sup in enumerate(lf.support))
        )
        loglik = pois + mult

        resid = self.y - mu
        grad_beta = self.X.T @ resid
        grad = [grad_beta]
        if self.include_screening:
            grad.append(np.array([float(resid[new].sum())]))

        # d loglik / d p(month m): deaths-minus-mean over the share, routed to
        # the months at or beyond (pre-diagnosis) / strictly below (post) the
        # stratum's month index, plus the multinomial term.
        n_bands = len(lf.bands)
        grad_p = np.zeros_like(probs)
        for b, sup in enumerate(lf.support):
            grad_p[b, sup] = self.hist_counts[b, sup] / probs[b, sup]
        if old.any():
            w_old = resid[old] / f[old]
            flat = b_old * (M + 1) + np.clip(d_old, 0, M)
            acc = np.bincount(flat, weights=w_old, minlength=n_bands * (M + 1))
            acc = acc.reshape(n_bands, M + 1)
            grad_p += np.cumsum(acc, axis=1)[:, 1:]
        if new.any():
            w_new = resid[new] / f[new]
            flat = b_new * (M + 2) + np.clip(d_new, 0, M + 1)
            acc = np.bincount(flat, weights=w_new, minlength=n_bands * (M + 2))
            acc = acc.reshape(n_bands, M + 2)
            csum = np.cumsum(acc, axis=1)
            grad_p += (csum[:, -1:] - csum)[:, 1 : M + 1]
        grad.append(lf.grad_z(grad_p, probs))
        g = np.concatenate(grad)
        return -loglik, -g


def _prepare_joint(
    cols: TableColumns,
    hist: LagHistogram,
    design: DesignMatrix,
    retained: np.ndarray,
    include_screening: bool,
    warn: bool = True,
) -> tuple[_JointProblem, np.ndarray, dict]:
    labels = design.labels
    keep_cols = [
        j for j in retained if labels[j] != ModelSpec.SCREENING_LABEL
    ]
    lagfree = _LagFreeParams(hist)
    is_post = cols.group != TableColumns.GROUP_NONE
    is_new = cols.group == TableColumns.GROUP_POST_NEW
    delta = np.zeros(cols.n, dtype=np.int64)
    band = np.zeros(cols.n, dtype=np.int64)
    if is_post.any():
        delta[is_post] = month_indices(cols.tsi[is_post])
        band[is_post] = band_indices(hist.bands, cols.age[is_post])

    min_sup = np.array([s[0] + 1 for s in lagfree.support])  # month numbers
    max_sup = np.array([s[-1] + 1 for s in lagfree.support])
    structural_zero = np.zeros(cols.n, dtype=bool)
    old = is_post & ~is_new
    structural_zero[is_new] = min_sup[band[is_new]] >= delta[is_new]
    structural_zero[old] = max_sup[band[old]] < delta[old]

    include = (cols.person_years > 0) & ~structural_zero
    n_excluded = int(np.sum(~include))
    if n_excluded and warn:
        log.warning(
            "joint likelihood excludes %d row(s) with structurally zero mean "
            "(zero person-years or no lag mass on the relevant side)",
            n_excluded,
        )
    problem = _JointProblem(
        X=design.matrix[np.ix_(include, keep_cols)],
        y=cols.cases[include],
        eta_base=_log_offset(cols.person_years[include]),
        is_new=is_new[include],
        is_post=is_post[include],
        band=band[include],
        delta=delta[include],
        lagfree=lagfree,
        hist_counts=hist.counts,
        include_screening=include_screening,
    )
    meta = {
        "excluded_rows": n_excluded,
        "keep_cols": keep_cols,
        "labels": tuple(labels[j] for j in keep_cols),
    }
    return problem, include, meta


def _maximize_joint(
    problem: _JointProblem, theta0: np.ndarray, grad_tol: float
) -> tuple[scipy.optimize.OptimizeResult, list[float]]:
    f0, _ = problem.neg_loglik_and_grad(theta0)
    if not np.isfinite(f0):
        raise EstimationError(
            "joint likelihood is -inf at the warm start; check the lag "
            "histogram support against the screened strata"
        )
    trace: list[float] = [-f0]

    def fun(theta):
        f, g = problem.neg_loglik_and_grad(theta)
        trace.append(-f)
        return f, g

    res = scipy.optimize.minimize(
        fun,
        theta0,
        jac=True,
        method="L-BFGS-B",
        options={
            "maxiter": MLE_MAX_ITER,
            "maxfun": 4 * MLE_MAX_ITER,
            "ftol": 1e-14,
            "gtol": grad_tol,
            "maxcor": 40,
        },
    )
    return res, trace


def estimate_method3(
    table, hist: LagHistogram, warm_start: EstimateResult, *, design=None, warn=True
) -> EstimateResult:
    """Joint maximum likelihood over the mortality table and lag histogram.

    Optimized entirely in log space with an analytic gradient; lag
    probabilities ride an unconstrained log-ratio transform over the
    positive-count bins.  The warm start must come from
    :func:`estimate_method2` - cold starts underflow the likelihood.
    """
    cols = _columns(table)
    _require_screened(cols)
    if hist.band_totals().sum() < 1:
        raise EstimationError("lag histogram is empty; the joint likelihood is unidentified")
    if warm_start is None or warm_start.fit is None or warm_start.model is None:
        raise InputError("method 3 requires the offset-regression result as its warm start")
    model = warm_start.model
    if design is None:
        design = model.design(cols)
    problem, include, meta = _prepare_joint(
        cols, hist, design, warm_start.fit.retained, include_screening=True, warn=warn
    )
    beta0 = warm_start.fit.coef[meta["keep_cols"]]
    theta0 = np.concatenate([beta0, [warm_start.log_effect], problem.lagfree.z_start()])
    total_deaths = float(problem.y.sum() + hist.band_totals().sum())
    grad_tol = MLE_GRAD_RTOL * max(1.0, total_deaths)
    res, trace = _maximize_joint(problem, theta0, grad_tol)

    neg_f, neg_g = problem.neg_loglik_and_grad(res.x)
    grad_norm = float(np.max(np.abs(neg_g))) if neg_g.size else 0.0
    if not np.isfinite(neg_f) or grad_norm > grad_tol:
        raise ConvergenceError(
            f"joint maximum likelihood did not converge after {res.nit} iterations "
            f"(gradient norm {grad_norm:.3g} > {grad_tol:.3g})",
            trace=trace,
        )
    loglik_start = trace[0]
    loglik_final = -float(neg_f)
    if loglik_final < loglik_start - 1e-8 * max(1.0, abs(loglik_start)):
        raise ConvergenceError(
            "joint maximum likelihood ended below its warm start", trace=trace
        )

    beta, s, z = problem.unpack(res.x)
    probs = problem.lagfree.probs(z)
    lag_params = LagParameters(bands=hist.bands, probs=probs)
    emp = hist.counts / hist.band_totals()[:, None]
    return EstimateResult(
        method=Method.M3,
        log_effect=float(s),
        diagnostics={
            "iterations": int(res.nit),
            "grad_norm": grad_norm,
            "grad_tol": grad_tol,
            "loglik_start": loglik_start,
            "loglik_final": loglik_final,
            "excluded_rows": meta["excluded_rows"],
            "max_lag_shift": float(np.max(np.abs(probs - emp))),
            "multinomial_coefficient": "omitted (constant in the parameters)",
        },
        model=model,
        full_params=FullModelParams(
            design_labels=meta["labels"],
            coef=beta,
            log_screening_effect=float(s),
            lag=lag_params,
        ),
    )


ESTIMATORS = {
    Method.M0: estimate_method0,
    Method.M1: estimate_method1,
    Method.M2: estimate_method2,
    Method.M3: estimate_method3,
}
