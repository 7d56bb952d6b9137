from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sbs.decomposition import decompose, grid, quant_error_series, verify_grid_subset
from sbs.quantizer import BitLadder, LadderError, discretize

L248 = BitLadder((2, 4, 8))


def _check_identity(z, ladder, atol=1e-12):
    d = decompose(z, ladder)
    sums = d.prefix_sums()
    for b, zk in zip(ladder.bits, sums):
        np.testing.assert_allclose(zk, discretize(z, 1 / (2 ** b - 1)), rtol=0, atol=atol)
    for b, r in zip(ladder.bits[1:], d.offsets):
        n = np.asarray(r) * (2 ** b - 1)
        np.testing.assert_allclose(n, np.round(n), rtol=0, atol=atol)
    assert len(d.offsets) == len(ladder.bits) - 1


def test_worked_examples():
    lad = BitLadder((2, 4))
    d = decompose(0.7, lad)
    assert d.base == pytest.approx(2 / 3) and d.offsets[0] == pytest.approx(0.0)
    d = decompose(0.55, lad)
    assert d.base == pytest.approx(2 / 3)
    assert d.offsets[0] == pytest.approx(-2 / 15)
    assert d.reconstruct() == pytest.approx(8 / 15)
    d = decompose(1.0, L248)
    assert d.base == 1.0 and all(r == 0 for r in d.offsets)


def test_random_sweep():
    z = np.random.default_rng(7).uniform(0, 1, 100_000)
    _check_identity(z, L248)


def test_exhaustive_cells_and_midpoints():
    # every 8-bit code, every midpoint between codes at every rung, and nudges either side
    pts = [np.arange(256) / 255]
    for b in L248.bits:
        n = 2 ** b - 1
        mids = (np.arange(n) + 0.5) / n
        pts += [mids, mids - 1e-9, mids + 1e-9]
    z = np.clip(np.concatenate(pts), 0, 1)
    _check_identity(z, L248)


@settings(max_examples=100)
@given(z=arrays(np.float64, 16, elements=st.floats(0, 1)),
       ladder=st.sampled_from([(2, 4), (2, 4, 8), (3, 6), (1, 2, 4, 8), (2, 6)]))
def test_identity_property(z, ladder):
    _check_identity(z, BitLadder(ladder))


def test_grid_subset():
    assert set(grid(2)) == {Fraction(0), Fraction(1, 3), Fraction(2, 3), Fraction(1)}
    assert set(grid(2)) <= set(grid(4)) <= set(grid(8))
    assert verify_grid_subset(L248)
    assert verify_grid_subset(BitLadder((3, 6)))
    with pytest.raises(LadderError):
        BitLadder((2, 3))


def test_error_series_on_grid_is_zero():
    z = np.array([0.0, 1 / 3, 2 / 3, 1.0])
    s = quant_error_series(z, L248)
    np.testing.assert_allclose(s.errors, 0.0, atol=1e-15)


def test_error_series_bound_and_monotone():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s = quant_error_series(rng.uniform(0, 1, 100), L248)
        assert np.all(s.changes <= s.bounds)
        assert np.all(np.diff(s.errors) <= 1e-15)


def test_error_series_rejects_zero_vector():
    with pytest.raises(ValueError):
        quant_error_series(np.zeros(5), L248)
