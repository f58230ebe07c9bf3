"""B-spline basis: hand oracle, recursion oracle, clamping, knot placement."""

import numpy as np
import numpy.testing as npt
import pytest

from excursion_or.errors import SpecError
from excursion_or.splines import bspline_basis, quantile_knots


def _recursive_basis(x, knots, degree):
    """Cox-de Boor recursion, written independently of the implementation."""
    ext = np.concatenate([
        np.full(degree, knots[0]), np.asarray(knots, float), np.full(degree, knots[-1])])
    right = ext[-1]

    def value(j, d, xx):
        if d == 0:
            if ext[j] <= xx < ext[j + 1]:
                return 1.0
            if xx == right and ext[j] < ext[j + 1] == right:
                return 1.0
            return 0.0
        out = 0.0
        den = ext[j + d] - ext[j]
        if den > 0:
            out += (xx - ext[j]) / den * value(j, d - 1, xx)
        den = ext[j + d + 1] - ext[j + 1]
        if den > 0:
            out += (ext[j + d + 1] - xx) / den * value(j + 1, d - 1, xx)
        return out

    n_basis = len(knots) + degree - 1
    xx = np.clip(x, knots[0], knots[-1])
    return np.array([[value(j, degree, xi) for j in range(n_basis)] for xi in xx])


def test_degree_one_hat_functions_by_hand():
    out = bspline_basis([0.5], knots=(0.0, 1.0, 2.0), degree=1)
    npt.assert_allclose(out, [[0.5, 0.5, 0.0]], atol=1e-15)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_matches_recursion_oracle(degree):
    rng = np.random.default_rng(20260819 + degree)
    knots = np.sort(rng.uniform(-1.0, 3.0, size=6))
    knots[0], knots[-1] = -1.0, 3.0
    x = np.concatenate([rng.uniform(-1.0, 3.0, size=40), knots, [-1.0, 3.0]])
    npt.assert_allclose(bspline_basis(x, knots, degree),
                        _recursive_basis(x, knots, degree), atol=1e-12)


@pytest.mark.parametrize("degree", [1, 2, 3])
def test_partition_of_unity(degree):
    rng = np.random.default_rng(3 + degree)
    knots = np.sort(rng.uniform(0.0, 10.0, size=degree + 4))
    x = rng.uniform(-2.0, 12.0, size=200)
    basis = bspline_basis(x, knots, degree)
    assert basis.shape == (200, len(knots) + degree - 1)
    npt.assert_allclose(basis.sum(axis=1), 1.0, atol=1e-12)
    assert basis.min() >= -1e-14


def test_values_below_range_clamp_to_first_knot():
    knots = (0.0, 1.0, 2.0, 3.0, 4.0)
    low = bspline_basis([-5.0, -0.001], knots, 3)
    at_edge = bspline_basis([0.0], knots, 3)
    npt.assert_allclose(low, np.repeat(at_edge, 2, axis=0), atol=1e-15)
    high = bspline_basis([9.0], knots, 3)
    npt.assert_allclose(high, bspline_basis([4.0], knots, 3), atol=1e-15)


def test_rejects_bad_degree_and_knots():
    with pytest.raises(SpecError):
        bspline_basis([0.5], (0.0, 1.0, 2.0), degree=0)
    with pytest.raises(SpecError):
        bspline_basis([0.5], (0.0, 1.0), degree=1)  # needs degree+2 knots
    with pytest.raises(SpecError):
        bspline_basis([0.5], (0.0, 1.0, 1.0, 2.0), degree=1)
    with pytest.raises(SpecError):
        bspline_basis([np.nan], (0.0, 1.0, 2.0), degree=1)


def test_quantile_knots_spans_data_and_dedups():
    rng = np.random.default_rng(42)
    vals = rng.normal(size=500)
    knots = quantile_knots(vals, n_interior=8)
    assert knots[0] == vals.min() and knots[-1] == vals.max()
    assert knots.size == 10
    assert np.all(np.diff(knots) > 0)


def test_quantile_knots_rejects_coarse_data():
    with pytest.raises(SpecError):
        quantile_knots([1.0, 1.0, 1.0, 2.0], n_interior=8)
    with pytest.raises(SpecError):
        quantile_knots([np.nan, np.inf])
