import dataclasses

import numpy as np
import pytest

from refmort.errors import ConfigurationError
from refmort.lagmodel import estimate_lag_survival
from refmort.registry import ScreeningGroup, validate
from refmort.simulator import (
    RegionSpec,
    Scenario,
    expected_cells,
    load_scenario,
    make_lognormal_lag_probs,
    scenario_from_dict,
    simulate,
)
from conftest import build_mini_scenario


def test_simulation_is_deterministic(mini_scenario):
    a = simulate(mini_scenario, 42)
    b = simulate(mini_scenario, 42)
    assert a.table == b.table
    assert a.hist == b.hist
    assert simulate(mini_scenario, 43).table != a.table


def test_simulated_table_validates(mini_sim):
    assert validate(mini_sim.table).ok


def test_expected_cells_scale_linearly(mini_scenario):
    base = expected_cells(mini_scenario).columns
    scaled = expected_cells(mini_scenario.with_person_years(mini_scenario.person_years * 10)).columns
    assert np.allclose(scaled.cases, 10 * base.cases, rtol=1e-12)
    assert np.allclose(scaled.person_years, 10 * base.person_years, rtol=1e-12)


def test_null_scenario_split_means_sum_to_unsplit_mean(mini_scenario):
    # with no screening effect, the two split pieces of a stratum carry
    # exactly the mortality the stratum would have had without a program
    null = mini_scenario.with_ratio(1.0)
    cols = expected_cells(null).columns
    never = dataclasses.replace(
        null, regions=tuple(RegionSpec(r.name, None, r.log_level) for r in null.regions)
    )
    ref = expected_cells(never).columns
    ref_mean = {}
    for i in range(ref.n):
        key = (ref.year[i], ref.cohort[i], ref.regions[ref.region_index[i]])
        ref_mean[key] = ref.cases[i]

    pair_sum: dict = {}
    for i in range(cols.n):
        key = (cols.year[i], cols.cohort[i], cols.regions[cols.region_index[i]])
        pair_sum[key] = pair_sum.get(key, 0.0) + cols.cases[i]
    for key, total in pair_sum.items():
        assert total == pytest.approx(ref_mean[key], rel=1e-10)


def test_screening_ratio_scales_postnew_means(mini_scenario):
    eff = expected_cells(mini_scenario).columns
    null = expected_cells(mini_scenario.with_ratio(1.0)).columns
    new = eff.group == 2
    assert np.allclose(eff.cases[new], mini_scenario.true_screening_ratio * null.cases[new], rtol=1e-12)
    assert np.allclose(eff.cases[~new], null.cases[~new], rtol=1e-12)


def test_total_deaths_match_expectation_within_4_sd(mini_scenario):
    means = expected_cells(mini_scenario).columns.cases
    total_mean = means.sum()
    sd = np.sqrt(total_mean)
    totals = np.array([simulate(mini_scenario, s).table.columns.cases.sum() for s in range(8)])
    assert np.all(np.abs(totals - total_mean) < 4 * sd)


def test_lag_histogram_converges_to_true_survival(mini_scenario):
    big = mini_scenario.with_person_years(mini_scenario.person_years * 80)
    sim = simulate(big, 5)
    assert sim.hist.band_totals().sum() >= 1e5
    est = estimate_lag_survival(sim.hist)
    truth = big.true_survival()
    assert np.abs(est.rho - truth.rho).max() < 0.02


def test_simulated_offsets_come_from_simulated_histogram(mini_sim):
    rho = estimate_lag_survival(mini_sim.hist)
    cols = mini_sim.table.columns
    old = cols.group == 1
    from refmort.estimators import band_indices, month_indices, survival_values

    d = month_indices(cols.tsi[old])
    b = band_indices(rho.bands, cols.age[old])
    assert np.allclose(cols.prop_target[old], survival_values(rho, d, b), atol=0)


def test_truth_record_serializable(mini_sim):
    doc = mini_sim.truth.to_dict()
    assert doc["true_screening_ratio"] == 0.8
    assert doc["seed"] == 0
    import json

    json.dumps(doc)


def test_lognormal_probs_normalized():
    p = make_lognormal_lag_probs(36.0, 0.9, 180)
    assert p.shape == (180,)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p >= 0)
    # median lands near the requested month
    cdf = np.cumsum(p)
    median_month = int(np.searchsorted(cdf, 0.5)) + 1
    assert 30 <= median_month <= 42


def test_scenario_validation_errors():
    sc = build_mini_scenario()
    with pytest.raises(ConfigurationError):
        sc.with_person_years(-1.0)
    with pytest.raises(ConfigurationError):
        sc.with_ratio(0.0)
    with pytest.raises(ConfigurationError):
        dataclasses.replace(sc, regions=(RegionSpec("A", 1980.0, 0.0),))
    # rollout so early that the lag support cannot cover the window
    with pytest.raises(ConfigurationError, match="lag support"):
        dataclasses.replace(
            sc,
            lag_probs=sc.lag_probs[:, :60] / sc.lag_probs[:, :60].sum(axis=1, keepdims=True),
        )


def test_bundled_scenario_loads():
    sc = load_scenario("nordic-small")
    assert sc.name == "nordic-small"
    assert sc.true_screening_ratio == 0.75
    assert len(sc.regions) == 6
    assert any(r.rollout_year is None for r in sc.regions)
    rollouts = [r.rollout_year for r in sc.regions if r.rollout_year is not None]
    assert min(rollouts) >= 1995.0 and max(rollouts) <= 2005.0


def test_unknown_scenario_name():
    with pytest.raises(ConfigurationError, match="unknown scenario"):
        load_scenario("no-such-scenario")


def test_scenario_from_dict_missing_key():
    with pytest.raises(ConfigurationError, match="missing key"):
        scenario_from_dict({"name": "x"})


def test_straddle_pieces_share_stratum(mini_sim, mini_scenario):
    # region A rolls out mid-1996: every invited cohort's 1996 row appears as
    # a none piece plus a post pair with person-years split 50/50
    cols = mini_sim.table.columns
    year_mask = (cols.year == 1996) & (cols.region_index == 0)
    groups = set(cols.group[year_mask].tolist())
    assert groups == {0, 1, 2}
    none_py = cols.person_years[year_mask & (cols.group == 0)]
    post_py = cols.person_years[year_mask & (cols.group == 2)]
    frac = (1996 + 1) - 1996.5
    # invited cohorts have both pieces; never-invited old cohorts only none
    assert np.isclose(post_py, mini_scenario.person_years * frac).all()
