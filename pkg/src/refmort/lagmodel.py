"""Diagnosis-to-death lag distribution from historic pre-screening data.

Lags are whole months counted from 1: a death within the first month after
diagnosis records lag 1 (ceiling convention), so the empirical survival
proportion at month 0 is exactly 1.  ``estimate_lag_survival`` gives the
probability that a death's diagnosis lies at least delta months back;
``survival_from_params`` is the same quantity expressed through the
month-by-month lag probabilities, and the two agree exactly at the
multinomial maximum likelihood estimate (the empirical proportions).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import xlogy

from .errors import EstimationError, SchemaError, ValidationError

LAG_CSV_COLUMNS = ("age_lo", "age_hi", "lag_months", "deaths")
SURVIVAL_CSV_COLUMNS = ("age_lo", "age_hi", "delta_months", "rho")


def month_index(years: float) -> int:
    """Whole-month index for a time since invitation given in years.

    Ceiling of 12*years with a small guard against float noise, so a
    stratum 2.4 months after invitation looks up P(lag >= 3 months) and an
    invitation-date stratum (0 years) looks up month 0.
    """
    if years < 0:
        raise ValueError(f"time since invitation must be nonnegative, got {years}")
    return max(0, math.ceil(12.0 * years - 1e-9))


def _check_bands(bands) -> tuple[tuple[float, float], ...]:
    out = tuple((float(lo), float(hi)) for lo, hi in bands)
    if not out:
        raise ValueError("at least one age band required")
    for lo, hi in out:
        if not lo < hi:
            raise ValueError(f"age band [{lo}, {hi}) is empty")
    for (_, hi), (lo, _) in zip(out, out[1:]):
        if lo < hi:
            raise ValueError("age bands must be disjoint and ordered")
    return out


class _Banded:
    """Shared band arithmetic for the lag containers."""

    bands: tuple[tuple[float, float], ...]

    def band_index(self, age: float) -> int:
        for i, (lo, hi) in enumerate(self.bands):
            if lo <= age < hi:
                return i
        raise EstimationError(
            f"age {age} falls outside the configured lag age bands {list(self.bands)}"
        )

    @property
    def n_bands(self) -> int:
        return len(self.bands)


@dataclass(frozen=True)
class LagHistogram(_Banded):
    """Deaths by whole-month lag (months 1..M), one row per age band."""

    bands: tuple[tuple[float, float], ...]
    counts: np.ndarray  # shape (n_bands, M); column i <-> lag of i+1 months

    def __post_init__(self):
        object.__setattr__(self, "bands", _check_bands(self.bands))
        c = np.asarray(self.counts, dtype=np.int64)
        if c.ndim != 2 or c.shape[0] != len(self.bands):
            raise ValueError("counts must be (n_bands, max_months)")
        if np.any(c < 0):
            raise ValueError("lag counts must be nonnegative")
        c = c.copy()
        c.setflags(write=False)
        object.__setattr__(self, "counts", c)

    @property
    def max_months(self) -> int:
        return self.counts.shape[1]

    def band_totals(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, LagHistogram):
            return NotImplemented
        return self.bands == other.bands and np.array_equal(self.counts, other.counts)


@dataclass(frozen=True)
class LagSurvival(_Banded):
    """Per band, rho[delta] = P(lag >= delta months) for delta = 0..M."""

    bands: tuple[tuple[float, float], ...]
    rho: np.ndarray  # shape (n_bands, M+1)

    def __post_init__(self):
        object.__setattr__(self, "bands", _check_bands(self.bands))
        r = np.asarray(self.rho, dtype=float)
        if r.ndim != 2 or r.shape[0] != len(self.bands):
            raise ValueError("rho must be (n_bands, max_months + 1)")
        if np.any(r < -1e-12) or np.any(r > 1 + 1e-12):
            raise ValueError("rho entries must lie in [0, 1]")
        if np.any(np.diff(r, axis=1) > 1e-12):
            raise ValueError("rho must be nonincreasing in delta")
        r = np.clip(r, 0.0, 1.0)
        r.setflags(write=False)
        object.__setattr__(self, "rho", r)

    @property
    def max_months(self) -> int:
        return self.rho.shape[1] - 1

    def value(self, delta_months: int, age: float) -> float:
        """rho at a whole-month delta for the band covering ``age``.

        Deltas beyond the observed maximum lag truncate to 0: the historic
        window bounds observable lags, and the defining count ratio is 0
        there.
        """
        if delta_months < 0:
            raise ValueError("delta must be nonnegative")
        b = self.band_index(age)
        if delta_months > self.max_months:
            return 0.0
        return float(self.rho[b, delta_months])

    def __eq__(self, other):
        if not isinstance(other, LagSurvival):
            return NotImplemented
        return self.bands == other.bands and np.array_equal(self.rho, other.rho)


@dataclass(frozen=True)
class LagParameters(_Banded):
    """Per band, probability of each whole-month lag (months 1..M)."""

    bands: tuple[tuple[float, float], ...]
    probs: np.ndarray  # shape (n_bands, M); column i <-> lag of i+1 months

    def __post_init__(self):
        object.__setattr__(self, "bands", _check_bands(self.bands))
        p = np.asarray(self.probs, dtype=float)
        if p.ndim != 2 or p.shape[0] != len(self.bands):
            raise ValueError("probs must be (n_bands, max_months)")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("lag probabilities must lie in [0, 1]")
        sums = p.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-10):
            raise ValueError(f"lag probabilities must sum to 1 per band, got {sums}")
        p = p.copy()
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def max_months(self) -> int:
        return self.probs.shape[1]

    def __eq__(self, other):
        if not isinstance(other, LagParameters):
            return NotImplemented
        return self.bands == other.bands and np.array_equal(self.probs, other.probs)


def estimate_lag_survival(hist: LagHistogram) -> LagSurvival:
    """Empirical survival of the lag distribution, per age band.

    rho[delta] = (deaths with lag >= delta months) / (all deaths in band).
    """
    totals = hist.band_totals()
    for b, tot in enumerate(totals):
        if tot < 1:
            lo, hi = hist.bands[b]
            raise EstimationError(f"age band [{lo}, {hi}) has no recorded deaths")
    tails = np.cumsum(hist.counts[:, ::-1], axis=1)[:, ::-1]  # tails[:, i] = deaths with lag >= i+1
    rho = np.empty((hist.n_bands, hist.max_months + 1))
    rho[:, 0] = 1.0
    rho[:, 1:] = tails / totals[:, None]
    return LagSurvival(bands=hist.bands, rho=rho)


def mle_lag_params(hist: LagHistogram) -> LagParameters:
    """Multinomial maximum likelihood estimate: the empirical proportions."""
    totals = hist.band_totals()
    for b, tot in enumerate(totals):
        if tot < 1:
            lo, hi = hist.bands[b]
            raise EstimationError(f"age band [{lo}, {hi}) has no recorded deaths")
    return LagParameters(bands=hist.bands, probs=hist.counts / totals[:, None])


def survival_from_params(params: LagParameters, delta_months: int, band: int) -> float:
    """P(lag >= delta months) = 1 - sum of the month probabilities below delta.

    Exactly 1 at delta <= 1 (empty sum) and exactly 0 beyond the parameter
    support (the full sum is 1 by construction).
    """
    if delta_months < 0:
        raise ValueError("delta must be nonnegative")
    if not 0 <= band < params.n_bands:
        raise ValueError(f"band index {band} out of range for {params.n_bands} bands")
    if delta_months > params.max_months:
        return 0.0
    return float(1.0 - params.probs[band, : max(delta_months - 1, 0)].sum())


def lag_log_likelihood(hist: LagHistogram, params: LagParameters) -> float:
    """Multinomial log likelihood of the histogram, summed over bands.

    The multinomial coefficient is omitted - it is constant in the
    parameters; a count at a zero-probability month yields -inf rather than
    an exception.
    """
    if params.bands != hist.bands:
        raise ValueError("params and histogram must share age bands")
    if params.max_months != hist.max_months:
        raise ValueError("params and histogram must share the lag support")
    counts = hist.counts.astype(float)
    if np.any((counts > 0) & (params.probs == 0.0)):
        return -np.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.sum(xlogy(counts, params.probs)))


def parse_lag_csv(path) -> LagHistogram:
    """Read a lag histogram from ``age_lo, age_hi, lag_months, deaths`` rows.

    Months are 1-based; a recorded lag of 0 is rejected (record a death in
    the month of diagnosis as lag 1).  Missing months within a band count as
    zero; the support extends to the largest month present in the file.
    """
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in LAG_CSV_COLUMNS:
            if col not in header:
                raise SchemaError(f"lag file {path} is missing column {col!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                lo = float(row["age_lo"])
                hi = float(row["age_hi"])
                m = int(row["lag_months"])
                d = int(row["deaths"])
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"lag file {path} line {lineno}: {exc}") from exc
            if m < 1:
                raise ValidationError(
                    f"lag file {path} line {lineno}: lag_months must be >= 1 "
                    "(whole months, ceiling convention)"
                )
            if d < 0:
                raise ValidationError(f"lag file {path} line {lineno}: negative deaths")
            rows.append((lo, hi, m, d))
    if not rows:
        raise ValidationError(f"lag file {path} contains no data rows")
    bands = sorted({(lo, hi) for lo, hi, _, _ in rows})
    max_m = max(m for _, _, m, _ in rows)
    counts = np.zeros((len(bands), max_m), dtype=np.int64)
    index = {band: i for i, band in enumerate(bands)}
    for lo, hi, m, d in rows:
        counts[index[(lo, hi)], m - 1] += d
    return LagHistogram(bands=tuple(bands), counts=counts)


def write_lag_csv(hist: LagHistogram, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LAG_CSV_COLUMNS)
        for b, (lo, hi) in enumerate(hist.bands):
            for i in range(hist.max_months):
                writer.writerow([repr(lo), repr(hi), i + 1, int(hist.counts[b, i])])


def write_survival_csv(surv: LagSurvival, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SURVIVAL_CSV_COLUMNS)
        for b, (lo, hi) in enumerate(surv.bands):
            for d in range(surv.max_months + 1):
                writer.writerow([repr(lo), repr(hi), d, repr(float(surv.rho[b, d]))])
