"""Bootstrap confidence intervals for the screening-effect estimators.

Resampling is anchored at the observed data: every cell count is redrawn as
Poisson with mean equal to the observed count, and every lag-band count
vector as multinomial with the band total and the empirical proportions.
Each replicate re-runs the full pipeline - survival proportions, offsets,
fits - and the interval is the percentile interval of the ratio-scale
replicates.  Replicate b uses its own generator seeded from (seed, b), so
results are identical regardless of worker count.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np

from .errors import (
    ConvergenceError,
    EstimationError,
    InputError,
    TruncationError,
)
from .estimators import (
    EstimateResult,
    Method,
    ModelSpec,
    band_indices,
    estimate_method0,
    estimate_method1,
    estimate_method2,
    estimate_method3,
    month_indices,
    survival_values,
    _subset,
)
from .lagmodel import LagHistogram, estimate_lag_survival
from .registry import MortalityTable, TableColumns

log = logging.getLogger(__name__)

UNRELIABLE_FAILURE_FRACTION = 0.10


@dataclass(frozen=True)
class BootstrapConfig:
    replicates: int = 1000
    seed: int = 0
    ci_level: float = 0.95
    jobs: int = 1

    def __post_init__(self):
        if self.replicates < 2:
            raise ValueError("bootstrap needs at least 2 replicates")
        if not 0.0 < self.ci_level < 1.0:
            raise ValueError("ci_level must lie in (0, 1)")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


@dataclass
class _Context:
    """Everything a replicate needs; built once, shared by all workers."""

    method: Method
    seed: int
    cols: TableColumns
    hist: LagHistogram | None
    band_probs: np.ndarray | None
    band_totals: np.ndarray | None
    old_mask: np.ndarray
    new_mask: np.ndarray
    post_mask: np.ndarray
    d_post: np.ndarray
    band_post: np.ndarray
    model_trend: ModelSpec | None
    trend_fit_design: object
    trend_pred_design: object
    model_joint: ModelSpec | None
    joint_design: object
    glm_warm: object = None


def _make_context(
    method: Method,
    table: MortalityTable,
    hist: LagHistogram | None,
    seed: int,
    point: EstimateResult,
) -> _Context:
    cols = table.columns
    old_mask = cols.group == TableColumns.GROUP_POST_OLD
    new_mask = cols.group == TableColumns.GROUP_POST_NEW
    post_mask = old_mask | new_mask
    d_post = month_indices(cols.tsi[post_mask]) if post_mask.any() else np.zeros(0, dtype=np.int64)
    if hist is not None and post_mask.any():
        band_post = band_indices(hist.bands, cols.age[post_mask])
    else:
        band_post = np.zeros(int(post_mask.sum()), dtype=np.int64)

    model_trend = trend_fit_design = trend_pred_design = None
    model_joint = joint_design = None
    glm_warm = point.fit if method is not Method.M3 else None
    if method in (Method.M0, Method.M1):
        none_sub = _subset(cols, cols.group == TableColumns.GROUP_NONE)
        model_trend = point.model
        trend_fit_design = model_trend.design(none_sub)
        trend_pred_design = model_trend.design(_subset(cols, new_mask))
    else:
        model_joint = point.model
        joint_design = model_joint.design(cols)
        if method is Method.M3:
            # warm the per-replicate offset regression with a fresh fit on
            # the original data (the M3 point result carries no GLM fit)
            glm_warm = estimate_method2(cols, model=model_joint, design=joint_design, warn=False).fit

    band_probs = band_totals = None
    if hist is not None:
        totals = hist.band_totals()
        band_totals = totals
        band_probs = hist.counts / np.maximum(totals, 1)[:, None]
    return _Context(
        method=method,
        seed=seed,
        cols=cols,
        hist=hist,
        band_probs=band_probs,
        band_totals=band_totals,
        old_mask=old_mask,
        new_mask=new_mask,
        post_mask=post_mask,
        d_post=d_post,
        band_post=band_post,
        model_trend=model_trend,
        trend_fit_design=trend_fit_design,
        trend_pred_design=trend_pred_design,
        model_joint=model_joint,
        joint_design=joint_design,
        glm_warm=glm_warm,
    )


def _one_replicate(ctx: _Context, b: int) -> float:
    rng = np.random.default_rng([ctx.seed, b])
    y_star = rng.poisson(ctx.cols.cases).astype(float)
    hist_star = None
    rho_star = None
    if ctx.hist is not None:
        counts = np.vstack(
            [
                rng.multinomial(int(n), p)
                for n, p in zip(ctx.band_totals, ctx.band_probs)
            ]
        )
        hist_star = LagHistogram(bands=ctx.hist.bands, counts=counts)
        rho_star = estimate_lag_survival(hist_star)

    if ctx.method is Method.M0:
        cols_star = ctx.cols.with_values(cases=y_star)
        result = estimate_method0(
            cols_star,
            model=ctx.model_trend,
            fit_design=ctx.trend_fit_design,
            pred_design=ctx.trend_pred_design,
            warn=False,
            glm_warm=ctx.glm_warm,
        )
        return result.screening_rate_ratio

    prop_star = np.ones(ctx.cols.n)
    rho_post = survival_values(rho_star, ctx.d_post, ctx.band_post)
    prop_post = np.where(ctx.old_mask[ctx.post_mask], rho_post, 1.0 - rho_post)
    prop_star[ctx.post_mask] = prop_post
    cols_star = ctx.cols.with_values(cases=y_star, prop_target=prop_star)

    if ctx.method is Method.M1:
        result = estimate_method1(
            cols_star,
            rho_star,
            model=ctx.model_trend,
            fit_design=ctx.trend_fit_design,
            pred_design=ctx.trend_pred_design,
            warn=False,
            glm_warm=ctx.glm_warm,
        )
    elif ctx.method is Method.M2:
        result = estimate_method2(
            cols_star, model=ctx.model_joint, design=ctx.joint_design, warn=False,
            glm_warm=ctx.glm_warm,
        )
    else:
        warm = estimate_method2(
            cols_star, model=ctx.model_joint, design=ctx.joint_design, warn=False,
            glm_warm=ctx.glm_warm,
        )
        result = estimate_method3(
            cols_star, hist_star, warm, design=ctx.joint_design, warn=False
        )
    return result.screening_rate_ratio


def _run_chunk(ctx: _Context, indices: list[int]) -> list[tuple[int, float]]:
    out = []
    for b in indices:
        try:
            out.append((b, _one_replicate(ctx, b)))
        except (ConvergenceError, EstimationError, InputError, TruncationError):
            out.append((b, np.nan))
    return out


def bootstrap_estimate(
    method: Method,
    table: MortalityTable,
    hist: LagHistogram | None,
    cfg: BootstrapConfig,
) -> EstimateResult:
    """Point estimate plus a percentile bootstrap interval.

    The point estimate is computed first on the original data - its errors
    propagate.  Failed replicates (nonconvergence, degenerate resamples) are
    recorded and excluded; a failure fraction above 10% flags the interval
    as unreliable in the diagnostics.
    """
    method = Method(method)
    if method is not Method.M0 and hist is None:
        raise InputError(f"bootstrap for {method.value} needs the lag histogram")

    rho = estimate_lag_survival(hist) if hist is not None else None
    if method is Method.M0:
        point = estimate_method0(table)
    elif method is Method.M1:
        point = estimate_method1(table, rho)
    elif method is Method.M2:
        point = estimate_method2(table)
    else:
        warm = estimate_method2(table)
        point = estimate_method3(table, hist, warm)

    ctx = _make_context(method, table, hist, cfg.seed, point)
    indices = list(range(cfg.replicates))
    if cfg.jobs == 1:
        pairs = _run_chunk(ctx, indices)
    else:
        chunks = [indices[i :: cfg.jobs] for i in range(cfg.jobs)]
        pairs = []
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            for part in pool.map(partial(_run_chunk, ctx), chunks):
                pairs.extend(part)
    pairs.sort(key=lambda t: t[0])
    all_estimates = np.array([v for _, v in pairs])

    good = all_estimates[np.isfinite(all_estimates)]
    n_failed = int(cfg.replicates - good.size)
    failure_fraction = n_failed / cfg.replicates
    if good.size < 2:
        raise EstimationError(
            f"only {good.size} bootstrap replicate(s) succeeded; no interval is computable"
        )
    alpha = 1.0 - cfg.ci_level
    ci_low, ci_high = np.quantile(good, [alpha / 2.0, 1.0 - alpha / 2.0], method="linear")
    diagnostics = dict(point.diagnostics)
    diagnostics["bootstrap"] = {
        "replicates": cfg.replicates,
        "failed": n_failed,
        "failure_fraction": failure_fraction,
        "ci_level": cfg.ci_level,
        "seed": cfg.seed,
        "ci_unreliable": failure_fraction > UNRELIABLE_FAILURE_FRACTION,
    }
    if failure_fraction > UNRELIABLE_FAILURE_FRACTION:
        log.warning(
            "%.0f%% of bootstrap replicates failed; interval flagged unreliable",
            100 * failure_fraction,
        )
    out = EstimateResult(
        method=method,
        log_effect=point.log_effect,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        replicates=good,
        diagnostics=diagnostics,
        fit=point.fit,
        model=point.model,
        full_params=point.full_params,
    )
    out.replicate_table = all_estimates
    return out
