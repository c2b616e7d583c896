"""Synthetic-registry generator: the ground-truth oracle for the estimators.

Simulation happens at stratum level: each Lexis cell's death count is drawn
as Poisson with mean rate * person-years, which is exactly the model the
estimators fit (piecewise-constant hazards), so recovered effects can be
compared against the scenario's true screening rate ratio.  The historic
lag histogram is drawn by sampling whole-month lags for the never-screened
deaths from the scenario's true lag distribution.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import norm

from .errors import ConfigurationError
from .lagmodel import (
    LagHistogram,
    LagSurvival,
    estimate_lag_survival,
    month_index,
)
from .registry import (
    MortalityCell,
    MortalityTable,
    RolloutSchedule,
    ScheduleEntry,
    ScreeningGroup,
    invitation_time_since,
)
from .splines import knots_from_data, natural_basis


@dataclass(frozen=True)
class RegionSpec:
    name: str
    rollout_year: float | None
    log_level: float


@dataclass(frozen=True)
class Scenario:
    """Generative configuration: smooth baseline surface, rollout pattern,
    true lag distribution, and the true screening rate ratio."""

    name: str
    study_window: tuple[int, int]
    age_range: tuple[int, int]
    invited_age_range: tuple[int, int]
    person_years: float
    true_screening_ratio: float
    intercept: float
    age_coefficients: tuple[float, ...]
    period_coefficients: tuple[float, ...]
    cohort_coefficients: tuple[float, ...]
    regions: tuple[RegionSpec, ...]
    lag_bands: tuple[tuple[float, float], ...]
    lag_probs: np.ndarray  # (n_bands, M); column i <-> lag of i+1 months

    def __post_init__(self):
        p = np.asarray(self.lag_probs, dtype=float)
        if p.ndim != 2 or p.shape[0] != len(self.lag_bands):
            raise ConfigurationError("lag_probs must be (n_bands, max_months)")
        if np.any(p < 0):
            raise ConfigurationError("lag probabilities must be nonnegative")
        if np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigurationError("lag probabilities must sum to 1 per age band")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "lag_probs", p)
        if self.person_years <= 0:
            raise ConfigurationError("person_years must be positive")
        if self.true_screening_ratio <= 0:
            raise ConfigurationError("true_screening_ratio must be positive")
        start, end = self.study_window
        if start > end:
            raise ConfigurationError("study window start must not exceed its end")
        for r in self.regions:
            if r.rollout_year is not None and r.rollout_year < start:
                raise ConfigurationError(
                    f"region {r.name!r} rollout {r.rollout_year} precedes the study window"
                )
        max_months = p.shape[1]
        for r in self.regions:
            if r.rollout_year is not None and r.rollout_year <= end:
                worst = month_index(invitation_time_since(end, r.rollout_year))
                if worst > max_months:
                    raise ConfigurationError(
                        f"region {r.name!r}: time since rollout reaches month {worst}, "
                        f"beyond the lag support of {max_months} months"
                    )

    @property
    def max_lag_months(self) -> int:
        return self.lag_probs.shape[1]

    def schedule(self) -> RolloutSchedule:
        lo, hi = self.invited_age_range
        return RolloutSchedule(
            {r.name: ScheduleEntry(r.rollout_year, lo, hi) for r in self.regions}
        )

    def true_survival(self) -> LagSurvival:
        # rho[d] = P(lag >= d) with months starting at 1, so rho[0] = rho[1] = 1.
        heads = np.cumsum(self.lag_probs, axis=1)
        rho = np.ones((len(self.lag_bands), self.max_lag_months + 1))
        rho[:, 2:] = 1.0 - heads[:, : self.max_lag_months - 1]
        return LagSurvival(bands=self.lag_bands, rho=np.clip(rho, 0.0, 1.0))

    def with_ratio(self, ratio: float) -> "Scenario":
        return replace(self, true_screening_ratio=ratio)

    def with_person_years(self, person_years: float) -> "Scenario":
        return replace(self, person_years=person_years)


@dataclass(frozen=True)
class TruthRecord:
    true_screening_ratio: float
    true_survival: LagSurvival
    scenario_name: str
    seed: int | None = None

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_name,
            "seed": self.seed,
            "true_screening_ratio": self.true_screening_ratio,
            "true_lag_survival": {
                f"[{lo}, {hi})": [float(v) for v in self.true_survival.rho[b]]
                for b, (lo, hi) in enumerate(self.true_survival.bands)
            },
        }


@dataclass(frozen=True)
class SimOutput:
    table: MortalityTable
    hist: LagHistogram
    truth: TruthRecord


def make_lognormal_lag_probs(median_months: float, sigma: float, max_months: int) -> np.ndarray:
    """Whole-month lag probabilities from a discretized lognormal.

    Month m gets the lognormal mass on (m-1, m], renormalized to the
    truncated support 1..max_months.
    """
    if median_months <= 0 or sigma <= 0 or max_months < 1:
        raise ConfigurationError("lognormal lag needs positive median, sigma and support")
    edges = np.arange(0, max_months + 1, dtype=float)
    with np.errstate(divide="ignore"):
        z = (np.log(edges) - np.log(median_months)) / sigma
    cdf = norm.cdf(z)
    cdf[0] = 0.0
    probs = np.diff(cdf)
    total = probs.sum()
    if total <= 0:
        raise ConfigurationError("lognormal lag has no mass on the requested support")
    return probs / total


def _lag_block_from_config(cfg: dict) -> tuple[tuple[tuple[float, float], ...], np.ndarray]:
    bands = tuple((float(lo), float(hi)) for lo, hi in cfg["age_bands"])
    kind = cfg.get("kind", "lognormal")
    if kind == "lognormal":
        med = cfg["median_months"]
        sig = cfg["sigma"]
        max_m = int(cfg["max_months"])
        probs = np.vstack(
            [make_lognormal_lag_probs(float(m), float(s), max_m) for m, s in zip(med, sig)]
        )
    elif kind == "explicit":
        probs = np.asarray(cfg["probabilities"], dtype=float)
    else:
        raise ConfigurationError(f"unknown lag_distribution kind {kind!r}")
    return bands, probs


def scenario_from_dict(cfg: dict) -> Scenario:
    try:
        baseline = cfg["baseline"]
        bands, probs = _lag_block_from_config(cfg["lag_distribution"])
        return Scenario(
            name=str(cfg.get("name", "unnamed")),
            study_window=tuple(int(v) for v in cfg["study_window"]),
            age_range=tuple(int(v) for v in cfg["age_range"]),
            invited_age_range=tuple(int(v) for v in cfg["invited_age_range"]),
            person_years=float(cfg["person_years_per_stratum"]),
            true_screening_ratio=float(cfg["true_screening_ratio"]),
            intercept=float(baseline["intercept"]),
            age_coefficients=tuple(float(v) for v in baseline["age_coefficients"]),
            period_coefficients=tuple(float(v) for v in baseline["period_coefficients"]),
            cohort_coefficients=tuple(float(v) for v in baseline["cohort_coefficients"]),
            regions=tuple(
                RegionSpec(
                    name=str(r["name"]),
                    rollout_year=None if r.get("rollout_year") is None else float(r["rollout_year"]),
                    log_level=float(r.get("log_level", 0.0)),
                )
                for r in cfg["regions"]
            ),
            lag_bands=bands,
            lag_probs=probs,
        )
    except KeyError as exc:
        raise ConfigurationError(f"scenario is missing key {exc}") from exc


def load_scenario(name_or_path: str) -> Scenario:
    """Load a bundled scenario by name or any scenario YAML by path."""
    path = Path(name_or_path)
    if path.suffix in (".yaml", ".yml") or path.exists():
        text = path.read_text()
    else:
        resource = name_or_path.replace("-", "_") + ".yaml"
        ref = importlib.resources.files("refmort.scenarios").joinpath(resource)
        if not ref.is_file():
            raise ConfigurationError(f"unknown scenario {name_or_path!r} (no file {resource})")
        text = ref.read_text()
    cfg = yaml.safe_load(text)
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"scenario file {name_or_path!r} is not a mapping")
    return scenario_from_dict(cfg)


@dataclass(frozen=True)
class _StratumMeans:
    """Expected counts of every emitted cell, in emission order."""

    year: int
    cohort: int
    region: str
    kind: str  # "none" | "post"
    person_years: float
    tsi: float | None
    survival: float | None  # true P(pre-invitation diagnosis) at this stratum
    mean_none: float
    mean_old: float
    mean_new: float


def _surface_lookup(scenario: Scenario):
    start, end = scenario.study_window
    age_lo, age_hi = scenario.age_range
    years = np.arange(start, end + 1)
    ages = np.arange(age_lo, age_hi + 1)
    cohorts = np.arange(start - age_hi, end - age_lo + 1)
    df_p = len(scenario.period_coefficients)
    df_a = len(scenario.age_coefficients)
    df_c = len(scenario.cohort_coefficients)
    p_eff = natural_basis(years, knots_from_data(years, df_p)) @ np.asarray(scenario.period_coefficients)
    a_eff = natural_basis(ages, knots_from_data(ages, df_a)) @ np.asarray(scenario.age_coefficients)
    c_eff = natural_basis(cohorts, knots_from_data(cohorts, df_c)) @ np.asarray(scenario.cohort_coefficients)
    return (
        dict(zip(years.tolist(), p_eff)),
        dict(zip(ages.tolist(), a_eff)),
        dict(zip(cohorts.tolist(), c_eff)),
    )


def _iter_strata(scenario: Scenario) -> list[_StratumMeans]:
    period_eff, age_eff, cohort_eff = _surface_lookup(scenario)
    schedule = scenario.schedule()
    truth = scenario.true_survival()
    start, end = scenario.study_window
    age_lo, age_hi = scenario.age_range
    ratio = scenario.true_screening_ratio
    out: list[_StratumMeans] = []
    for region in scenario.regions:
        for cohort in range(start - age_hi, end - age_lo + 1):
            first = schedule.first_invitation(region.name, cohort)
            for year in range(max(start, cohort + age_lo), min(end, cohort + age_hi) + 1):
                lam = np.exp(
                    scenario.intercept
                    + age_eff[year - cohort]
                    + period_eff[year]
                    + cohort_eff[cohort]
                    + region.log_level
                )
                pieces: list[tuple[str, float]] = []
                if first is None or first >= year + 1:
                    pieces.append(("none", scenario.person_years))
                elif first <= year:
                    pieces.append(("post", scenario.person_years))
                else:
                    frac_post = (year + 1) - first
                    pieces.append(("none", scenario.person_years * (1.0 - frac_post)))
                    pieces.append(("post", scenario.person_years * frac_post))
                for kind, py in pieces:
                    if kind == "none":
                        out.append(
                            _StratumMeans(
                                year=year,
                                cohort=cohort,
                                region=region.name,
                                kind="none",
                                person_years=py,
                                tsi=None,
                                survival=None,
                                mean_none=lam * py,
                                mean_old=0.0,
                                mean_new=0.0,
                            )
                        )
                    else:
                        tsi = invitation_time_since(year, first)
                        survival = truth.value(month_index(tsi), year - cohort)
                        out.append(
                            _StratumMeans(
                                year=year,
                                cohort=cohort,
                                region=region.name,
                                kind="post",
                                person_years=py,
                                tsi=tsi,
                                survival=survival,
                                mean_none=0.0,
                                mean_old=lam * survival * py,
                                mean_new=lam * (1.0 - survival) * ratio * py,
                            )
                        )
    return out


def _cells_from_counts(
    scenario: Scenario,
    strata: list[_StratumMeans],
    none_counts,
    old_counts,
    new_counts,
    prop_lookup: LagSurvival,
) -> MortalityTable:
    cells: list[MortalityCell] = []
    i_none = i_old = i_new = 0
    for s in strata:
        if s.kind == "none":
            cells.append(
                MortalityCell(
                    year=s.year,
                    cohort=s.cohort,
                    region=s.region,
                    group=ScreeningGroup.NONE,
                    person_years=s.person_years,
                    cases=float(none_counts[i_none]),
                )
            )
            i_none += 1
            continue
        rho = prop_lookup.value(month_index(s.tsi), s.year - s.cohort)
        cells.append(
            MortalityCell(
                year=s.year,
                cohort=s.cohort,
                region=s.region,
                group=ScreeningGroup.POST_OLD,
                person_years=s.person_years,
                cases=float(old_counts[i_old]),
                time_since_invitation=s.tsi,
                prop_target=rho,
            )
        )
        cells.append(
            MortalityCell(
                year=s.year,
                cohort=s.cohort,
                region=s.region,
                group=ScreeningGroup.POST_NEW,
                person_years=s.person_years,
                cases=float(new_counts[i_new]),
                time_since_invitation=s.tsi,
                prop_target=1.0 - rho,
            )
        )
        i_old += 1
        i_new += 1
    return MortalityTable(
        tuple(cells), age_range=scenario.age_range, study_window=scenario.study_window
    )


def simulate(scenario: Scenario, seed: int) -> SimOutput:
    """Draw one synthetic registry + historic lag dataset; deterministic in
    ``seed``.

    Cell counts are Poisson at the scenario's true means; the lag histogram
    is multinomial over the true month probabilities with one draw per
    never-screened death.  The returned table carries offsets computed from
    the *simulated* histogram, exactly as the estimation pipeline would see.
    """
    strata = _iter_strata(scenario)
    rng = np.random.default_rng(seed)
    none_strata = [s for s in strata if s.kind == "none"]
    post_strata = [s for s in strata if s.kind == "post"]
    none_counts = rng.poisson([s.mean_none for s in none_strata])
    old_counts = rng.poisson([s.mean_old for s in post_strata])
    new_counts = rng.poisson([s.mean_new for s in post_strata])

    band_totals = np.zeros(len(scenario.lag_bands), dtype=np.int64)
    band_of_age = {}
    truth_surv = scenario.true_survival()
    for s, n in zip(none_strata, none_counts):
        age = s.year - s.cohort
        if age not in band_of_age:
            band_of_age[age] = truth_surv.band_index(age)
        band_totals[band_of_age[age]] += n
    hist_counts = np.vstack(
        [
            rng.multinomial(int(band_totals[b]), scenario.lag_probs[b])
            for b in range(len(scenario.lag_bands))
        ]
    )
    hist = LagHistogram(bands=scenario.lag_bands, counts=hist_counts)
    rho_hat = estimate_lag_survival(hist)

    table = _cells_from_counts(scenario, strata, none_counts, old_counts, new_counts, rho_hat)
    truth = TruthRecord(
        true_screening_ratio=scenario.true_screening_ratio,
        true_survival=truth_surv,
        scenario_name=scenario.name,
        seed=seed,
    )
    return SimOutput(table=table, hist=hist, truth=truth)


def expected_cells(scenario: Scenario) -> MortalityTable:
    """Noiseless table of exact means, with offsets from the true lag
    distribution - the oracle the estimators are checked against."""
    strata = _iter_strata(scenario)
    none_means = [s.mean_none for s in strata if s.kind == "none"]
    old_means = [s.mean_old for s in strata if s.kind == "post"]
    new_means = [s.mean_new for s in strata if s.kind == "post"]
    return _cells_from_counts(
        scenario, strata, none_means, old_means, new_means, scenario.true_survival()
    )
