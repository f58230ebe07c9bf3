"""B-spline basis evaluation.

Knot convention: the caller supplies the full breakpoint sequence including
both boundaries; the boundary knots are then repeated ``degree`` extra times
so the basis is clamped.  That yields ``len(knots) + degree - 1`` basis
functions.  Inputs outside the boundary are clamped to it, which keeps
predictions flat beyond the observed range instead of extrapolating
polynomials.
"""

from __future__ import annotations

import numpy as np
from scipy.interpolate import BSpline

from .errors import SpecError


def bspline_basis(x, knots, degree: int) -> np.ndarray:
    """Evaluate the clamped B-spline basis at ``x``.

    Returns an array of shape ``(len(x), len(knots) + degree - 1)`` whose
    rows sum to one (partition of unity).
    """
    knots_arr = np.asarray(knots, dtype=float)
    if degree < 1:
        raise SpecError(f"spline degree must be >= 1, got {degree}")
    if knots_arr.ndim != 1 or knots_arr.size < degree + 2:
        raise SpecError(
            f"need at least degree+2 = {degree + 2} knots (boundaries included), "
            f"got {knots_arr.size}")
    if np.any(np.diff(knots_arr) <= 0.0):
        raise SpecError("knots must be strictly increasing")

    x_arr = np.atleast_1d(np.asarray(x, dtype=float))
    if not np.all(np.isfinite(x_arr)):
        raise SpecError("spline inputs must be finite")
    x_clamped = np.clip(x_arr, knots_arr[0], knots_arr[-1])

    extended = np.concatenate([
        np.full(degree, knots_arr[0]), knots_arr, np.full(degree, knots_arr[-1])])
    design = BSpline.design_matrix(x_clamped, extended, degree, extrapolate=False)
    return design.toarray()


def quantile_knots(values, n_interior: int = 8) -> np.ndarray:
    """Breakpoints at empirical quantiles: boundaries plus interior quantiles.

    Duplicate quantiles (ties in the data) are collapsed; raises SpecError if
    too few distinct breakpoints survive to support a cubic basis.
    """
    vals = np.asarray(values, dtype=float)
    vals = vals[np.isfinite(vals)]
    if vals.size == 0:
        raise SpecError("no finite values to place knots on")
    probs = np.linspace(0.0, 1.0, n_interior + 2)
    knots = np.unique(np.quantile(vals, probs))
    if knots.size < 5:  # cubic basis needs degree+2 = 5 breakpoints
        raise SpecError(
            f"only {knots.size} distinct knot location(s); covariate too coarse for a spline")
    return knots
