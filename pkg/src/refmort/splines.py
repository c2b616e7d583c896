"""Natural cubic spline bases for the smooth age/period/cohort terms.

A natural cubic spline is cubic between its knots, twice continuously
differentiable everywhere, and linear beyond its boundary knots.  The basis
returned here spans that space together with the intercept, so a regression
on ``[1, basis]`` reproduces any linear function exactly and extrapolates
linearly outside the boundary - the behaviour the pre-screening trend fits
rely on when predicting into post-screening calendar years.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class KnotSet:
    """Boundary and interior knots for one covariate, df basis columns."""

    boundary: tuple[float, float]
    interior: tuple[float, ...]

    def __post_init__(self):
        lo, hi = self.boundary
        if not lo < hi:
            raise ValueError(f"boundary knots must be distinct and ordered, got {self.boundary}")
        ints = np.asarray(self.interior, dtype=float)
        if ints.size and not np.all(np.diff(ints) > 0):
            raise ValueError("interior knots must be strictly increasing")
        if ints.size and not (lo < ints[0] and ints[-1] < hi):
            raise ValueError("interior knots must lie strictly inside the boundary")

    @property
    def df(self) -> int:
        return len(self.interior) + 1

    def to_dict(self) -> dict:
        return {"boundary": list(self.boundary), "interior": list(self.interior)}

    @classmethod
    def from_dict(cls, d: dict) -> "KnotSet":
        return cls(boundary=tuple(d["boundary"]), interior=tuple(d["interior"]))


def knots_from_data(values, df: int) -> KnotSet:
    """Place boundary knots at the data range and interior knots at quantiles.

    Interior knots sit at the i/df quantiles (i = 1..df-1) of the *distinct*
    values, so repeated observations do not pull the knots around.
    """
    if df < 2:
        raise ValueError(f"df must be >= 2, got {df}")
    distinct = np.unique(np.asarray(values, dtype=float))
    if not np.all(np.isfinite(distinct)):
        raise ValueError("values must be finite")
    if distinct.size < df + 1:
        raise ValueError(
            f"need at least {df + 1} distinct values for df={df}, got {distinct.size}"
        )
    qs = np.arange(1, df) / df
    interior = np.quantile(distinct, qs)
    return KnotSet(boundary=(float(distinct[0]), float(distinct[-1])), interior=tuple(float(k) for k in interior))


def natural_basis(x, knots: KnotSet) -> np.ndarray:
    """Evaluate the df natural-spline basis columns at ``x``.

    Inside the boundary the columns are cubic B-spline combinations
    constrained to zero second derivative at both boundary knots; outside
    they continue linearly (first-order Taylor extension at the boundary).
    The leading B-spline column is dropped, as the intercept it carries
    belongs to the regression's constant/region block.
    """
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    if not np.all(np.isfinite(x)):
        raise ValueError("basis evaluation points must be finite")

    lo, hi = knots.boundary
    t = np.concatenate([[lo] * 4, knots.interior, [hi] * 4])
    n = len(t) - 4
    full = BSpline(t, np.eye(n), 3)

    basis = np.empty((x.size, n))
    inside = (x >= lo) & (x <= hi)
    if inside.any():
        basis[inside] = full(x[inside])
    for mask, knot in ((x < lo, lo), (x > hi, hi)):
        if mask.any():
            value = full(np.array([knot]))[0]
            slope = full.derivative(1)(np.array([knot]))[0]
            basis[mask] = value + np.outer(x[mask] - knot, slope)

    curvature = full.derivative(2)(np.array([lo, hi]))  # (2, n)
    basis = basis[:, 1:]
    curvature = curvature[:, 1:]
    q, _ = np.linalg.qr(curvature.T, mode="complete")
    out = basis @ q[:, 2:]
    return out[0] if scalar else out
