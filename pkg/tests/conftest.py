import numpy as np
import pytest

from refmort.simulator import (
    RegionSpec,
    Scenario,
    load_scenario,
    make_lognormal_lag_probs,
    simulate,
)


def build_mini_scenario(ratio: float = 0.8, person_years: float = 1500.0) -> Scenario:
    """Small three-region scenario for fast module tests."""
    max_months = 120
    probs = np.vstack(
        [
            make_lognormal_lag_probs(32.0, 0.8, max_months),
            make_lognormal_lag_probs(28.0, 0.85, max_months),
        ]
    )
    return Scenario(
        name="mini",
        study_window=(1990, 2005),
        age_range=(55, 69),
        invited_age_range=(55, 69),
        person_years=person_years,
        true_screening_ratio=ratio,
        intercept=-6.6,
        age_coefficients=(0.3, 0.5, 0.6, 0.9, 0.7),
        period_coefficients=(-0.05, -0.1, -0.15, -0.18, -0.2),
        cohort_coefficients=(0.05, 0.08, 0.02, 0.04, -0.01),
        regions=(
            RegionSpec("A", 1996.5, 0.0),
            RegionSpec("B", 2000.0, -0.06),
            RegionSpec("C", None, 0.04),
        ),
        lag_bands=((55.0, 62.0), (62.0, 70.0)),
        lag_probs=probs,
    )


@pytest.fixture(scope="session")
def mini_scenario():
    return build_mini_scenario()


@pytest.fixture(scope="session")
def mini_sim(mini_scenario):
    return simulate(mini_scenario, 0)


@pytest.fixture(scope="session")
def nordic_scenario():
    return load_scenario("nordic-small")


@pytest.fixture(scope="session")
def nordic_sim(nordic_scenario):
    return simulate(nordic_scenario, 7)
