import numpy as np
import pytest

from refmort.errors import EstimationError, InputError
from refmort.estimators import (
    EstimateResult,
    Method,
    ModelSpec,
    _LagFreeParams,
    _maximize_joint,
    _prepare_joint,
    estimate_method0,
    estimate_method1,
    estimate_method2,
    estimate_method3,
)
from refmort.lagmodel import LagHistogram, estimate_lag_survival, mle_lag_params
from refmort.registry import MortalityCell, MortalityTable, ScreeningGroup
from refmort.simulator import expected_cells, simulate
from conftest import build_mini_scenario


@pytest.fixture(scope="module")
def mini_rho(mini_sim):
    return estimate_lag_survival(mini_sim.hist)


@pytest.fixture(scope="module")
def mini_results(mini_sim, mini_rho):
    r0 = estimate_method0(mini_sim.table)
    r1 = estimate_method1(mini_sim.table, mini_rho)
    r2 = estimate_method2(mini_sim.table)
    r3 = estimate_method3(mini_sim.table, mini_sim.hist, r2)
    return r0, r1, r2, r3


def test_ratio_is_exp_of_log_effect(mini_results):
    for r in mini_results:
        assert r.screening_rate_ratio == pytest.approx(np.exp(r.log_effect), rel=1e-15)


def test_estimates_in_plausible_range(mini_results):
    r0, r1, r2, r3 = mini_results
    for r in (r1, r2, r3):
        assert 0.6 < r.screening_rate_ratio < 1.0
    # diluted baseline sits closer to 1 than the refined estimators
    assert r0.screening_rate_ratio > r2.screening_rate_ratio


def test_method2_large_count_limit():
    # counts generated exactly at rate x 0.8 x (1 - rho): coefficient
    # recovers 0.8 as counts grow
    sc = build_mini_scenario(ratio=0.8)
    big = expected_cells(sc.with_person_years(sc.person_years * 2e4))
    rounded = big.with_values(cases=np.round(big.columns.cases))
    r2 = estimate_method2(rounded)
    assert r2.screening_rate_ratio == pytest.approx(0.8, abs=1e-4)


def test_method1_large_count_limit():
    sc = build_mini_scenario(ratio=0.8)
    big = expected_cells(sc.with_person_years(sc.person_years * 2e4))
    rounded = big.with_values(cases=np.round(big.columns.cases))
    r1 = estimate_method1(rounded, sc.true_survival())
    assert r1.screening_rate_ratio == pytest.approx(0.8, abs=1e-4)


def test_method0_dilution_sits_between_truth_and_one():
    sc = build_mini_scenario(ratio=0.75)
    big = expected_cells(sc.with_person_years(sc.person_years * 2e4))
    rounded = big.with_values(cases=np.round(big.columns.cases))
    r0 = estimate_method0(rounded)
    assert 0.75 < r0.screening_rate_ratio < 1.0


def test_method0_null_scenario_is_one():
    sc = build_mini_scenario(ratio=1.0)
    big = expected_cells(sc.with_person_years(sc.person_years * 2e4))
    rounded = big.with_values(cases=np.round(big.columns.cases))
    r0 = estimate_method0(rounded)
    assert r0.screening_rate_ratio == pytest.approx(1.0, abs=2e-3)


def unscreened_only_table():
    cells = [
        MortalityCell(1990 + i, 1935, "R1", ScreeningGroup.NONE, 100.0, float(i % 3))
        for i in range(8)
    ]
    return MortalityTable(tuple(cells))


def test_no_screened_strata_is_input_error(mini_sim):
    table = unscreened_only_table()
    with pytest.raises(InputError, match="screen"):
        estimate_method0(table)
    with pytest.raises(InputError, match="screen"):
        estimate_method2(table)
    with pytest.raises(InputError, match="screen"):
        estimate_method3(table, mini_sim.hist, None)


def test_method0_zero_observation_time():
    cells = list(unscreened_only_table().cells)
    cells.append(MortalityCell(1993, 1935, "R1", ScreeningGroup.POST_OLD, 0.0, 0.0, 0.5, 0.9))
    cells.append(MortalityCell(1993, 1935, "R1", ScreeningGroup.POST_NEW, 0.0, 0.0, 0.5, 0.1))
    with pytest.raises(InputError, match="observation time"):
        estimate_method0(MortalityTable(tuple(cells)))


def test_method3_requires_warm_start(mini_sim):
    with pytest.raises(InputError, match="warm start"):
        estimate_method3(mini_sim.table, mini_sim.hist, None)


def test_method3_requires_nonempty_histogram(mini_sim, mini_results):
    empty = LagHistogram(bands=mini_sim.hist.bands, counts=np.zeros_like(mini_sim.hist.counts))
    with pytest.raises(EstimationError, match="empty"):
        estimate_method3(mini_sim.table, empty, mini_results[2])


def test_method2_method3_agree(mini_results):
    _, _, r2, r3 = mini_results
    assert abs(r2.screening_rate_ratio - r3.screening_rate_ratio) <= 0.02


def test_method3_ascent_property(mini_results):
    r3 = mini_results[3]
    assert r3.diagnostics["loglik_final"] >= r3.diagnostics["loglik_start"]
    assert r3.diagnostics["grad_norm"] <= r3.diagnostics["grad_tol"]


def test_method3_lag_params_stay_near_empirical(mini_sim, mini_results):
    # the historic histogram dominates, so the joint optimum's lag
    # probabilities move only slightly from the empirical proportions
    r3 = mini_results[3]
    emp = mle_lag_params(mini_sim.hist)
    assert np.abs(r3.full_params.lag.probs - emp.probs).max() < 5e-3
    assert r3.diagnostics["max_lag_shift"] > 0.0


def test_method3_decouples_without_screened_strata(mini_sim):
    # with no screened strata the joint likelihood factorizes and the lag
    # block stays exactly at the multinomial MLE
    table = unscreened_only_table()
    cols = table.columns
    hist = LagHistogram(
        bands=((0.0, 120.0),), counts=np.array([[4, 0, 9, 3, 1]])
    )
    model = ModelSpec.from_columns(cols, include_screening=False, df=2)
    design = model.design(cols)
    from refmort.glm import fit_poisson

    fit = fit_poisson(design, cols.cases, np.log(cols.person_years), warn_excluded=False)
    problem, _, meta = _prepare_joint(cols, hist, design, fit.retained, include_screening=False, warn=False)
    theta0 = np.concatenate([fit.coef[meta["keep_cols"]], problem.lagfree.z_start()])
    grad_tol = 1e-6 * max(1.0, problem.y.sum() + hist.band_totals().sum())
    res, trace = _maximize_joint(problem, theta0, grad_tol)
    _, _, z = problem.unpack(res.x)
    probs = problem.lagfree.probs(z)
    assert np.abs(probs - mle_lag_params(hist).probs).max() <= 1e-8


def test_joint_gradient_matches_finite_differences(mini_sim, mini_results):
    r2 = mini_results[2]
    cols = mini_sim.table.columns
    design = r2.model.design(cols)
    problem, _, meta = _prepare_joint(
        cols, mini_sim.hist, design, r2.fit.retained, include_screening=True, warn=False
    )
    theta0 = np.concatenate(
        [r2.fit.coef[meta["keep_cols"]], [r2.log_effect], problem.lagfree.z_start()]
    )
    rng = np.random.default_rng(2)
    theta = theta0 + rng.normal(scale=0.01, size=theta0.size)
    f0, g = problem.neg_loglik_and_grad(theta)
    idx = np.concatenate(
        [
            np.arange(3),
            [design.matrix.shape[1] - 2],  # a coefficient near the screening slot
            [len(meta["keep_cols"])],  # the screening effect itself
            rng.integers(len(meta["keep_cols"]) + 1, theta.size, size=6),
        ]
    )
    h = 1e-6
    for j in np.unique(idx):
        e = np.zeros_like(theta)
        e[j] = h
        fp, _ = problem.neg_loglik_and_grad(theta + e)
        fm, _ = problem.neg_loglik_and_grad(theta - e)
        fd = (fp - fm) / (2 * h)
        assert fd == pytest.approx(g[j], rel=5e-4, abs=5e-4)


def test_method2_scale_invariance(mini_sim):
    import dataclasses

    k = 3.0
    base = estimate_method2(mini_sim.table)
    cells = tuple(
        dataclasses.replace(c, person_years=k * c.person_years, cases=k * c.cases)
        for c in mini_sim.table.cells
    )
    scaled = MortalityTable(cells, mini_sim.table.age_range, mini_sim.table.study_window)
    r = estimate_method2(scaled)
    assert r.log_effect == pytest.approx(base.log_effect, abs=1e-8)


def test_method2_all_unscreened_after_exclusion():
    cells = list(unscreened_only_table().cells)
    cells.append(MortalityCell(1993, 1935, "R1", ScreeningGroup.POST_OLD, 100.0, 2.0, 0.5, 1.0))
    cells.append(MortalityCell(1993, 1935, "R1", ScreeningGroup.POST_NEW, 100.0, 0.0, 0.5, 0.0))
    with pytest.raises(InputError, match="excluded"):
        estimate_method2(MortalityTable(tuple(cells)))


def test_zero_observed_postnew_deaths_raises(mini_sim, mini_rho):
    cols = mini_sim.table.columns
    cases = cols.cases.copy()
    cases[cols.group == 2] = 0.0
    table = mini_sim.table.with_values(cases=cases)
    with pytest.raises(EstimationError, match="no post-invitation-diagnosis deaths"):
        estimate_method2(table)
    with pytest.raises(EstimationError, match="no post-invitation-diagnosis deaths"):
        estimate_method1(table, mini_rho)


def test_estimate_result_serialization(mini_results):
    doc = mini_results[2].to_dict()
    assert doc["method"] == "M2"
    assert doc["screening_rate_ratio"] == pytest.approx(mini_results[2].screening_rate_ratio)
    import json

    json.dumps(doc)


def test_lagfree_transform_round_trip(mini_sim):
    lf = _LagFreeParams(mini_sim.hist)
    z = lf.z_start()
    probs = lf.probs(z)
    emp = mini_sim.hist.counts / mini_sim.hist.band_totals()[:, None]
    assert np.abs(probs - emp).max() < 1e-12
    zero_bins = mini_sim.hist.counts == 0
    assert np.all(probs[zero_bins] == 0.0)
