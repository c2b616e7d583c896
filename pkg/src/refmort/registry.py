"""Registry data model: Lexis strata, CSV ingestion, and risk-time splitting.

A stratum is one (calendar year, birth cohort, region) cell carrying person
years and death counts.  Strata with a screening history are split into two
cells sharing the same person years: deaths of cases diagnosed before first
invitation (post_old) and deaths of cases diagnosed after (post_new), with
offset multipliers from the historic lag distribution aligning their
expected shares.  Attained age is always year - cohort, never stored.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np

from .errors import (
    ConfigurationError,
    InputError,
    SchemaError,
    TruncationError,
    ValidationError,
)
from .lagmodel import LagSurvival, month_index

MORTALITY_CSV_COLUMNS = (
    "year",
    "cohort",
    "region",
    "screening_group",
    "person_years",
    "cases",
    "time_since_invitation",
    "prop_target",
    "scr_indicator",
)
RAW_CSV_COLUMNS = (
    "year",
    "cohort",
    "region",
    "screening_group",
    "person_years",
    "cases_pre_dx",
    "cases_post_dx",
)
SCHEDULE_CSV_COLUMNS = ("region", "first_invitation_year", "min_age", "max_age")

PAIR_SUM_TOL = 1e-12


class ScreeningGroup(str, Enum):
    NONE = "none"
    POST_OLD = "post_old"
    POST_NEW = "post_new"


@dataclass(frozen=True)
class MortalityCell:
    """One Lexis stratum cell of the split analysis table."""

    year: int
    cohort: int
    region: str
    group: ScreeningGroup
    person_years: float
    cases: float
    time_since_invitation: float | None = None
    prop_target: float = 1.0

    @property
    def age(self) -> int:
        return self.year - self.cohort

    @property
    def scr_indicator(self) -> int:
        return 1 if self.group is ScreeningGroup.POST_NEW else 0

    def key(self) -> tuple:
        return (self.year, self.cohort, self.region, self.group)


@dataclass
class TableColumns:
    """Column-array view of a table, for the numeric pipeline."""

    year: np.ndarray
    cohort: np.ndarray
    age: np.ndarray
    region_index: np.ndarray
    regions: tuple[str, ...]
    group: np.ndarray  # 0 none, 1 post_old, 2 post_new
    person_years: np.ndarray
    cases: np.ndarray
    tsi: np.ndarray  # nan where absent
    prop_target: np.ndarray

    GROUP_NONE = 0
    GROUP_POST_OLD = 1
    GROUP_POST_NEW = 2

    @property
    def n(self) -> int:
        return self.year.size

    @property
    def scr(self) -> np.ndarray:
        return (self.group == self.GROUP_POST_NEW).astype(float)

    def with_values(self, cases=None, prop_target=None) -> "TableColumns":
        out = TableColumns(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        if cases is not None:
            out.cases = np.asarray(cases, dtype=float)
        if prop_target is not None:
            out.prop_target = np.asarray(prop_target, dtype=float)
        return out


_GROUP_CODE = {
    ScreeningGroup.NONE: TableColumns.GROUP_NONE,
    ScreeningGroup.POST_OLD: TableColumns.GROUP_POST_OLD,
    ScreeningGroup.POST_NEW: TableColumns.GROUP_POST_NEW,
}


@dataclass(frozen=True)
class MortalityTable:
    """Immutable split analysis table; safe to share across threads."""

    cells: tuple[MortalityCell, ...]
    age_range: tuple[int, int] | None = None
    study_window: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "cells", tuple(self.cells))

    def __len__(self) -> int:
        return len(self.cells)

    @cached_property
    def columns(self) -> TableColumns:
        regions: list[str] = []
        seen: dict[str, int] = {}
        ridx = np.empty(len(self.cells), dtype=np.int64)
        for i, c in enumerate(self.cells):
            if c.region not in seen:
                seen[c.region] = len(regions)
                regions.append(c.region)
            ridx[i] = seen[c.region]
        return TableColumns(
            year=np.array([c.year for c in self.cells], dtype=np.int64),
            cohort=np.array([c.cohort for c in self.cells], dtype=np.int64),
            age=np.array([c.age for c in self.cells], dtype=np.int64),
            region_index=ridx,
            regions=tuple(regions),
            group=np.array([_GROUP_CODE[c.group] for c in self.cells], dtype=np.int64),
            person_years=np.array([c.person_years for c in self.cells], dtype=float),
            cases=np.array([c.cases for c in self.cells], dtype=float),
            tsi=np.array(
                [np.nan if c.time_since_invitation is None else c.time_since_invitation for c in self.cells],
                dtype=float,
            ),
            prop_target=np.array([c.prop_target for c in self.cells], dtype=float),
        )

    def with_values(self, cases=None, prop_target=None) -> "MortalityTable":
        """Copy with per-cell cases and/or prop_target replaced."""
        cases_arr = None if cases is None else np.asarray(cases, dtype=float)
        prop_arr = None if prop_target is None else np.asarray(prop_target, dtype=float)
        cells = []
        for i, c in enumerate(self.cells):
            kwargs = {}
            if cases_arr is not None:
                kwargs["cases"] = float(cases_arr[i])
            if prop_arr is not None:
                kwargs["prop_target"] = float(prop_arr[i])
            cells.append(replace(c, **kwargs) if kwargs else c)
        return MortalityTable(tuple(cells), self.age_range, self.study_window)


@dataclass(frozen=True)
class RawStratum:
    """One pre-split stratum row: deaths classified by diagnosis timing.

    ``group`` is ``none`` for strata without screening history in the row's
    observation interval, ``post`` for strata after first invitation (both
    count columns populated).  A calendar year straddling the invitation
    date appears as two rows - a ``none`` piece and a ``post`` piece - with
    person years apportioned upstream.
    """

    year: int
    cohort: int
    region: str
    group: str  # "none" | "post"
    person_years: float
    cases_pre_dx: int
    cases_post_dx: int

    @property
    def age(self) -> int:
        return self.year - self.cohort


@dataclass(frozen=True)
class RawMortalityTable:
    rows: tuple[RawStratum, ...]
    age_range: tuple[int, int] | None = None
    study_window: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(self.rows))

    def __len__(self) -> int:
        return len(self.rows)


@dataclass(frozen=True)
class ScheduleEntry:
    first_invitation: float | None
    min_age: int
    max_age: int


@dataclass(frozen=True)
class RolloutSchedule:
    """Per-region first-invitation date and invited age interval."""

    entries: dict[str, ScheduleEntry]

    def regions(self) -> tuple[str, ...]:
        return tuple(self.entries)

    def first_invitation(self, region: str, cohort: int) -> float | None:
        """Date the cohort is first invited in the region, or None if never.

        Cohorts older than the invited interval when the program starts are
        never invited; younger cohorts are invited once they reach the lower
        age bound.
        """
        try:
            e = self.entries[region]
        except KeyError:
            raise ConfigurationError(f"no rollout schedule entry for region {region!r}") from None
        if e.first_invitation is None:
            return None
        if e.first_invitation - cohort >= e.max_age + 1:
            return None
        return max(e.first_invitation, float(cohort + e.min_age))


@dataclass
class ValidationReport:
    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def _cell_key_str(year, cohort, region, group) -> str:
    return f"year={year} cohort={cohort} region={region} group={group}"


def validate(table: MortalityTable) -> ValidationReport:
    """Check every table invariant; one report line per violation."""
    report = ValidationReport()
    seen: set[tuple] = set()
    pairs: dict[tuple, dict[ScreeningGroup, MortalityCell]] = {}
    for c in table.cells:
        key = c.key()
        where = _cell_key_str(c.year, c.cohort, c.region, c.group.value)
        if key in seen:
            report.violations.append(f"duplicate cell key: {where}")
        seen.add(key)
        if not np.isfinite(c.person_years) or c.person_years < 0:
            report.violations.append(f"negative or nonfinite person_years: {where}")
        if not np.isfinite(c.cases) or c.cases < 0:
            report.violations.append(f"negative or nonfinite cases: {where}")
        elif float(c.cases) != int(c.cases):
            report.violations.append(f"non-integer cases: {where}")
        if not 0.0 <= c.prop_target <= 1.0:
            report.violations.append(f"prop_target outside [0, 1]: {where}")
        if c.group is ScreeningGroup.NONE:
            if c.prop_target != 1.0:
                report.violations.append(f"prop_target must be 1 for unscreened strata: {where}")
            if c.time_since_invitation is not None:
                report.violations.append(f"time_since_invitation set on unscreened stratum: {where}")
        else:
            if c.time_since_invitation is None or c.time_since_invitation < 0:
                report.violations.append(f"missing or negative time_since_invitation: {where}")
            pairs.setdefault((c.year, c.cohort, c.region), {})[c.group] = c
        if table.age_range is not None:
            lo, hi = table.age_range
            if not lo <= c.age <= hi:
                report.violations.append(f"age {c.age} outside study age range [{lo}, {hi}]: {where}")
        if table.study_window is not None:
            start, end = table.study_window
            if not start <= c.year <= end:
                report.violations.append(f"year outside study window [{start}, {end}]: {where}")
    for (year, cohort, region), got in pairs.items():
        where = _cell_key_str(year, cohort, region, "post_old/post_new")
        if set(got) != {ScreeningGroup.POST_OLD, ScreeningGroup.POST_NEW}:
            report.violations.append(f"screened stratum missing its split counterpart: {where}")
            continue
        old, new = got[ScreeningGroup.POST_OLD], got[ScreeningGroup.POST_NEW]
        if old.person_years != new.person_years:
            report.violations.append(f"post_old/post_new person_years differ: {where}")
        if abs(old.prop_target + new.prop_target - 1.0) > PAIR_SUM_TOL:
            report.violations.append(
                f"post_old/post_new prop_target sum {old.prop_target + new.prop_target!r} != 1: {where}"
            )
    return report


def _observed_ranges(years, ages):
    if not years:
        return None, None
    return (min(ages), max(ages)), (min(years), max(years))


def parse_mortality_csv(path, schema: dict[str, str] | None = None) -> MortalityTable:
    """Read a split analysis table; ``schema`` maps documented names to the
    file's actual column names when they differ."""
    colmap = {name: name for name in MORTALITY_CSV_COLUMNS}
    if schema:
        colmap.update(schema)
    cells = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for canonical, actual in colmap.items():
            if actual not in header:
                raise SchemaError(f"{path} is missing column {actual!r} (for {canonical})")
        seen: set[tuple] = set()
        for lineno, row in enumerate(reader, start=2):
            cell = _parse_cell(row, colmap, path, lineno)
            if cell.key() in seen:
                raise ValidationError(
                    f"{path} line {lineno}: duplicate cell key "
                    + _cell_key_str(cell.year, cell.cohort, cell.region, cell.group.value)
                )
            seen.add(cell.key())
            cells.append(cell)
    age_range, window = _observed_ranges([c.year for c in cells], [c.age for c in cells])
    return MortalityTable(tuple(cells), age_range=age_range, study_window=window)


def _parse_cell(row, colmap, path, lineno) -> MortalityCell:
    def fail(msg):
        raise ValidationError(f"{path} line {lineno}: {msg}")

    try:
        year = int(row[colmap["year"]])
        cohort = int(row[colmap["cohort"]])
        region = row[colmap["region"]].strip()
        group_raw = row[colmap["screening_group"]].strip()
        py = float(row[colmap["person_years"]])
        cases = int(row[colmap["cases"]])
        tsi_raw = (row[colmap["time_since_invitation"]] or "").strip()
        prop = float(row[colmap["prop_target"]])
        scr = int(row[colmap["scr_indicator"]])
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{path} line {lineno}: {exc}") from exc
    try:
        group = ScreeningGroup(group_raw)
    except ValueError:
        fail(f"unknown screening_group {group_raw!r} (expected none|post_old|post_new)")
    if py < 0:
        fail("negative person_years")
    if cases < 0:
        fail("negative cases")
    if not 0.0 <= prop <= 1.0:
        fail(f"prop_target {prop} outside [0, 1]")
    if group is ScreeningGroup.NONE:
        if tsi_raw:
            fail("time_since_invitation must be empty for unscreened strata")
        if prop != 1.0:
            fail("prop_target must be 1 for unscreened strata")
        tsi = None
    else:
        if not tsi_raw:
            fail("time_since_invitation required for screened strata")
        tsi = float(tsi_raw)
        if tsi < 0:
            fail("negative time_since_invitation")
    expected_scr = 1 if group is ScreeningGroup.POST_NEW else 0
    if scr != expected_scr:
        fail(f"scr_indicator {scr} inconsistent with screening_group {group.value}")
    return MortalityCell(
        year=year,
        cohort=cohort,
        region=region,
        group=group,
        person_years=py,
        cases=float(cases),
        time_since_invitation=tsi,
        prop_target=prop,
    )


def write_mortality_csv(table: MortalityTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MORTALITY_CSV_COLUMNS)
        for c in table.cells:
            writer.writerow(
                [
                    c.year,
                    c.cohort,
                    c.region,
                    c.group.value,
                    repr(float(c.person_years)),
                    int(c.cases),
                    "" if c.time_since_invitation is None else repr(float(c.time_since_invitation)),
                    repr(float(c.prop_target)),
                    c.scr_indicator,
                ]
            )


def parse_raw_mortality_csv(path) -> RawMortalityTable:
    """Read a pre-split table: deaths split by diagnosis timing per stratum."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in RAW_CSV_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path} is missing column {col!r}")
        seen: set[tuple] = set()
        for lineno, row in enumerate(reader, start=2):
            try:
                year = int(row["year"])
                cohort = int(row["cohort"])
                region = row["region"].strip()
                group = row["screening_group"].strip()
                py = float(row["person_years"])
                pre = int(row["cases_pre_dx"])
                post_raw = (row["cases_post_dx"] or "").strip()
                post = int(post_raw) if post_raw else 0
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path} line {lineno}: {exc}") from exc
            if group not in ("none", "post"):
                raise ValidationError(
                    f"{path} line {lineno}: unknown screening_group {group!r} (expected none|post)"
                )
            if py < 0 or pre < 0 or post < 0:
                raise ValidationError(f"{path} line {lineno}: negative person_years or counts")
            if group == "none" and post != 0:
                raise ValidationError(
                    f"{path} line {lineno}: unscreened stratum cannot have post-invitation-diagnosis deaths"
                )
            key = (year, cohort, region, group)
            if key in seen:
                raise ValidationError(f"{path} line {lineno}: duplicate stratum {key}")
            seen.add(key)
            rows.append(RawStratum(year, cohort, region, group, py, pre, post))
    age_range, window = _observed_ranges([r.year for r in rows], [r.age for r in rows])
    return RawMortalityTable(tuple(rows), age_range=age_range, study_window=window)


def write_raw_mortality_csv(raw: RawMortalityTable, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RAW_CSV_COLUMNS)
        for r in raw.rows:
            writer.writerow(
                [r.year, r.cohort, r.region, r.group, repr(float(r.person_years)), r.cases_pre_dx, r.cases_post_dx]
            )


def parse_schedule_csv(path) -> RolloutSchedule:
    entries: dict[str, ScheduleEntry] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in SCHEDULE_CSV_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path} is missing column {col!r}")
        for lineno, row in enumerate(reader, start=2):
            region = row["region"].strip()
            if region in entries:
                raise ValidationError(
                    f"{path} line {lineno}: more than one first-invitation date for region {region!r}"
                )
            raw_year = (row["first_invitation_year"] or "").strip()
            try:
                first = float(raw_year) if raw_year else None
                min_age = int(row["min_age"])
                max_age = int(row["max_age"])
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path} line {lineno}: {exc}") from exc
            if min_age > max_age:
                raise ValidationError(f"{path} line {lineno}: min_age > max_age")
            entries[region] = ScheduleEntry(first, min_age, max_age)
    return RolloutSchedule(entries)


def write_schedule_csv(schedule: RolloutSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCHEDULE_CSV_COLUMNS)
        for region, e in schedule.entries.items():
            writer.writerow(
                [
                    region,
                    "" if e.first_invitation is None else repr(float(e.first_invitation)),
                    e.min_age,
                    e.max_age,
                ]
            )


def invitation_time_since(year: int, first_invitation: float) -> float:
    """Midpoint of the stratum's post-invitation observation interval minus
    the invitation date: the interval is [max(year, invitation), year + 1)."""
    start = max(float(year), first_invitation)
    return (start + year + 1.0) / 2.0 - first_invitation


def split_risk_time(
    raw: RawMortalityTable, schedule: RolloutSchedule, lag: LagSurvival
) -> MortalityTable:
    """Turn pre-split strata into the analysis table.

    Each screened stratum becomes a post_old/post_new pair with equal person
    years; prop_target carries the expected share of deaths with diagnosis
    before first invitation (and its complement) at the stratum's time since
    invitation, from the age band covering year - cohort.
    """
    if isinstance(raw, MortalityTable):
        raise InputError("table is already split by diagnosis timing; refusing to re-split")
    start_end = raw.study_window
    for region in sorted({r.region for r in raw.rows}):
        entry = schedule.entries.get(region)
        if entry is None:
            raise ConfigurationError(f"no rollout schedule entry for region {region!r}")
        if entry.first_invitation is not None and start_end is not None:
            start, end = start_end
            if not start <= entry.first_invitation < end + 1:
                raise ConfigurationError(
                    f"region {region!r} first invitation {entry.first_invitation} "
                    f"lies outside the study window [{start}, {end}]"
                )
    cells: list[MortalityCell] = []
    for r in raw.rows:
        first = schedule.first_invitation(r.region, r.cohort)
        where = _cell_key_str(r.year, r.cohort, r.region, r.group)
        if r.group == "none":
            if first is not None and first <= r.year:
                raise ConfigurationError(
                    f"stratum marked 'none' lies after first invitation ({first}): {where}"
                )
            cells.append(
                MortalityCell(
                    year=r.year,
                    cohort=r.cohort,
                    region=r.region,
                    group=ScreeningGroup.NONE,
                    person_years=r.person_years,
                    cases=float(r.cases_pre_dx),
                )
            )
            continue
        if first is None:
            raise ConfigurationError(
                f"stratum marked 'post' in a region/cohort that is never invited: {where}"
            )
        if first >= r.year + 1:
            raise ConfigurationError(
                f"stratum marked 'post' ends before first invitation ({first}): {where}"
            )
        tsi = invitation_time_since(r.year, first)
        delta = month_index(tsi)
        if delta > lag.max_months:
            raise TruncationError(
                f"time since invitation {tsi:.2f}y (month {delta}) exceeds the "
                f"historic lag support of {lag.max_months} months: {where}"
            )
        rho = lag.value(delta, r.age)
        for group, cases, prop in (
            (ScreeningGroup.POST_OLD, r.cases_pre_dx, rho),
            (ScreeningGroup.POST_NEW, r.cases_post_dx, 1.0 - rho),
        ):
            cells.append(
                MortalityCell(
                    year=r.year,
                    cohort=r.cohort,
                    region=r.region,
                    group=group,
                    person_years=r.person_years,
                    cases=float(cases),
                    time_since_invitation=tsi,
                    prop_target=prop,
                )
            )
    return MortalityTable(tuple(cells), age_range=raw.age_range, study_window=raw.study_window)


def refresh_prop_target(table: MortalityTable, lag: LagSurvival) -> MortalityTable:
    """Recompute the split offsets of an already-split table from ``lag``.

    Used when the lag data changes (bootstrap resampling) while the
    stratum structure stays fixed.
    """
    props = []
    for c in table.cells:
        if c.group is ScreeningGroup.NONE:
            props.append(1.0)
            continue
        delta = month_index(c.time_since_invitation)
        if delta > lag.max_months:
            raise TruncationError(
                f"time since invitation {c.time_since_invitation:.2f}y exceeds the "
                f"historic lag support of {lag.max_months} months: "
                + _cell_key_str(c.year, c.cohort, c.region, c.group.value)
            )
        rho = lag.value(delta, c.age)
        props.append(rho if c.group is ScreeningGroup.POST_OLD else 1.0 - rho)
    return table.with_values(prop_target=props)


def combine_to_raw(table: MortalityTable) -> RawMortalityTable:
    """Inverse of :func:`split_risk_time`: merge each split pair back into a
    single pre-split stratum row."""
    rows: list[RawStratum] = []
    pending: dict[tuple, MortalityCell] = {}
    for c in table.cells:
        if c.group is ScreeningGroup.NONE:
            rows.append(
                RawStratum(c.year, c.cohort, c.region, "none", c.person_years, int(c.cases), 0)
            )
            continue
        key = (c.year, c.cohort, c.region)
        other = pending.pop(key, None)
        if other is None:
            pending[key] = c
            continue
        old, new = (c, other) if c.group is ScreeningGroup.POST_OLD else (other, c)
        rows.append(
            RawStratum(
                c.year, c.cohort, c.region, "post", c.person_years, int(old.cases), int(new.cases)
            )
        )
    if pending:
        missing = ", ".join(str(k) for k in pending)
        raise ValidationError(f"screened strata missing their split counterpart: {missing}")
    return RawMortalityTable(tuple(rows), age_range=table.age_range, study_window=table.study_window)
