import logging

import numpy as np
import pytest
import scipy.optimize

from refmort.errors import ConvergenceError
from refmort.estimators import ModelSpec
from refmort.glm import (
    DesignMatrix,
    fit_poisson,
    log_likelihood,
    poisson_log_likelihood,
    predict_mean,
)


def ones_design(n):
    return DesignMatrix(np.ones((n, 1)), ("const",))


def test_intercept_only_is_log_mean():
    fit = fit_poisson(ones_design(3), [1, 2, 3], np.zeros(3))
    assert fit.converged
    assert fit.coef[0] == pytest.approx(np.log(2.0), abs=1e-10)


def test_offset_saturation_gives_zero_coefficient():
    y = np.array([1.0, 2.0, 3.0])
    fit = fit_poisson(ones_design(3), y, np.log(y))
    assert fit.coef[0] == pytest.approx(0.0, abs=1e-10)


def test_duplicated_column_aliased_same_means():
    y = np.array([1.0, 2.0, 3.0])
    X = DesignMatrix(np.ones((3, 2)), ("a", "b"))
    fit = fit_poisson(X, y, np.zeros(3))
    assert len(fit.aliased) == 1
    mu = predict_mean(fit, X, np.zeros(3))
    ref = predict_mean(fit_poisson(ones_design(3), y, np.zeros(3)), ones_design(3), np.zeros(3))
    assert np.allclose(mu, ref, rtol=1e-10)


def test_all_zero_column_is_aliased_not_error():
    X = DesignMatrix(np.column_stack([np.ones(4), np.zeros(4)]), ("a", "z"))
    fit = fit_poisson(X, [1, 0, 2, 1], np.zeros(4))
    assert fit.aliased == ("z",)


def test_zero_py_rows_excluded_with_warning(caplog):
    X = ones_design(3)
    offset = np.array([0.0, -np.inf, 0.0])
    with caplog.at_level(logging.WARNING):
        fit = fit_poisson(X, [1, 5, 3], offset)
    assert fit.n_excluded_rows == 1
    assert any("excluding 1 row" in r.message for r in caplog.records)
    assert fit.coef[0] == pytest.approx(np.log(2.0), abs=1e-10)


@pytest.fixture(scope="module")
def apc_problem(nordic_sim):
    cols = nordic_sim.table.columns
    model = ModelSpec.from_columns(cols, include_screening=True)
    X = model.design(cols)
    with np.errstate(divide="ignore"):
        offset = np.log(cols.person_years) + np.log(cols.prop_target)
    return X, cols.cases, offset


def test_score_equations_hold(apc_problem):
    X, y, offset = apc_problem
    fit = fit_poisson(X, y, offset, warn_excluded=False)
    keep = offset > -np.inf
    mu = predict_mean(fit, X, np.where(keep, offset, 0.0))
    resid = np.where(keep, y - mu, 0.0)
    score = X.matrix[:, fit.retained].T @ resid
    assert np.abs(score).max() < 1e-6 * y.sum()


def test_apc_aliased_drop_invariance(apc_problem):
    # fitted means on the observed range do not depend on which column of
    # the collinear APC block is dropped
    X, y, offset = apc_problem
    keep = offset > -np.inf
    base = fit_poisson(X, y, offset, warn_excluded=False)
    assert len(base.aliased) >= 1
    mu_base = predict_mean(base, X, np.where(keep, offset, 0.0))[keep]
    # find the null-space of the design to identify interchangeable columns
    _, s, vt = np.linalg.svd(X.matrix[keep], full_matrices=False)
    null = vt[s < 1e-10 * s[0]]
    assert null.shape[0] == 1
    candidates = [X.labels[j] for j in np.flatnonzero(np.abs(null[0]) > 1e-3)]
    assert len(candidates) >= 2
    for label in candidates[:3]:
        alt = fit_poisson(X, y, offset, force_drop=(label,), warn_excluded=False)
        assert label in alt.aliased
        mu_alt = predict_mean(alt, X, np.where(keep, offset, 0.0))[keep]
        assert np.abs(mu_alt - mu_base).max() / np.abs(mu_base).max() < 1e-8


def test_agreement_with_direct_numerical_maximization():
    rng = np.random.default_rng(11)
    n, p = 400, 6
    M = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    X = DesignMatrix(M, tuple(f"c{i}" for i in range(p)))
    beta_true = np.array([0.5, 0.3, -0.2, 0.1, 0.0, 0.25])
    offset = np.log(rng.uniform(0.5, 2.0, size=n))
    y = rng.poisson(np.exp(M @ beta_true + offset)).astype(float)
    fit = fit_poisson(X, y, offset)

    def negll(beta):
        return -poisson_log_likelihood(y, np.exp(M @ beta + offset))

    res = scipy.optimize.minimize(negll, np.zeros(p), method="Nelder-Mead",
                                  options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
    assert np.abs(fit.coef - res.x).max() < 1e-6


def test_grid_search_oracle_single_coefficient():
    rng = np.random.default_rng(3)
    x = rng.normal(size=300)
    X = DesignMatrix(x[:, None], ("x",))
    y = rng.poisson(np.exp(0.4 * x + 1.0)).astype(float)
    offset = np.ones(300)
    fit = fit_poisson(X, y, offset)
    grid = np.linspace(-1, 1, 4001)
    lls = [poisson_log_likelihood(y, np.exp(b * x + offset)) for b in grid]
    best = grid[int(np.argmax(lls))]
    assert abs(best - fit.coef[0]) <= (grid[1] - grid[0])


def test_predict_offset_shift_doubles_means():
    y = np.array([1.0, 2.0, 3.0])
    X = ones_design(3)
    fit = fit_poisson(X, y, np.zeros(3))
    mu = predict_mean(fit, X, np.zeros(3))
    assert np.allclose(predict_mean(fit, X, np.full(3, np.log(2.0))), 2 * mu, rtol=1e-12)


def test_predict_zero_coefficients_returns_exposure():
    X = ones_design(3)
    fit = fit_poisson(X, [1.0, 2.0, 3.0], np.zeros(3))
    zeroed = fit.__class__(**{**fit.__dict__, "coef": np.zeros(1)})
    py = np.array([10.0, 20.0, 30.0])
    assert np.allclose(predict_mean(zeroed, X, np.log(py)), py)


def test_fitted_mean_sum_matches_observed_with_region_block(nordic_sim):
    cols = nordic_sim.table.columns
    none = cols.group == 0
    sub_idx = np.flatnonzero(none)
    from refmort.estimators import _subset

    sub = _subset(cols, none)
    model = ModelSpec.from_columns(sub, include_screening=False)
    X = model.design(sub)
    offset = np.log(sub.person_years)
    fit = fit_poisson(X, sub.cases, offset, warn_excluded=False)
    mu = predict_mean(fit, X, offset)
    assert mu.sum() == pytest.approx(sub.cases.sum(), rel=1e-8)


def test_rate_ratio_scale_invariance(mini_sim):
    cols = mini_sim.table.columns
    model = ModelSpec.from_columns(cols, include_screening=True)
    X = model.design(cols)
    with np.errstate(divide="ignore"):
        off = np.log(cols.person_years) + np.log(cols.prop_target)
    fit1 = fit_poisson(X, cols.cases, off, warn_excluded=False)
    k = 2.0
    fit2 = fit_poisson(X, k * cols.cases, off + np.log(k), warn_excluded=False)
    assert np.abs(fit1.coef - fit2.coef).max() < 1e-8


def test_loglik_examples():
    X = ones_design(2)
    fit = fit_poisson(X, [1.0, 1.0], np.zeros(2))
    mus = np.array([3.0, 0.5])
    assert poisson_log_likelihood(np.zeros(2), mus) == pytest.approx(-mus.sum())
    assert poisson_log_likelihood(np.array([1.0]), np.array([1.0])) == pytest.approx(-1.0)
    assert poisson_log_likelihood(np.array([2.0]), np.array([0.0])) == -np.inf
    assert np.isfinite(log_likelihood(fit, X, np.array([1.0, 1.0]), np.zeros(2)))


def test_covariance_symmetric_psd(apc_problem):
    X, y, offset = apc_problem
    fit = fit_poisson(X, y, offset, warn_excluded=False)
    cov = fit.covariance
    assert np.allclose(cov, cov.T)
    eigvals = np.linalg.eigvalsh(cov)
    assert eigvals.min() > -1e-12 * max(1.0, eigvals.max())


def test_input_validation_errors():
    X = ones_design(3)
    with pytest.raises(ValueError):
        fit_poisson(X, [1.0, -1.0, 2.0], np.zeros(3))
    with pytest.raises(ValueError):
        fit_poisson(X, [1.0, 2.0], np.zeros(3))
    with pytest.raises(ValueError):
        fit_poisson(X, [1.0, 2.0, 3.0], np.array([0.0, np.nan, 0.0]))
    with pytest.raises(ValueError):
        predict_mean(fit_poisson(X, [1, 2, 3], np.zeros(3)), DesignMatrix(np.ones((3, 1)), ("other",)), np.zeros(3))
