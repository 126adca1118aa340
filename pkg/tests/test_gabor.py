import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import correlate2d

from oracles import scalar_gabor
from palmcpn.gabor import (BankConfig, GaborParams, arc_shift, build_bank, build_curved_template,
                           build_template, curved_base, eval_gabor, grid, rotate_kernel)


def test_origin_is_one():
    for lam, sigma, theta in [(5, 1, 0.3), (15, 5, 2.9), (10, 3, 0)]:
        assert eval_gabor(0.0, 0.0, lam, sigma, theta) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(-20, 20), st.floats(-20, 20))
def test_quarter_turn_substitution(x, y):
    a = eval_gabor(x, y, 10, 3, math.pi / 2)
    b = eval_gabor(y, -x, 10, 3, 0.0)
    assert a == pytest.approx(b, abs=1e-12)


def test_half_wavelength_value():
    v = eval_gabor(5.0, 0.0, lam=10, sigma=3, theta=0.0, gamma=0.5)
    assert v == pytest.approx(-math.exp(-25 / 18), abs=1e-15)
    assert v == pytest.approx(-0.24935, abs=1e-5)


def test_params_validation():
    with pytest.raises(ValueError):
        GaborParams(10, 3, size=34)
    with pytest.raises(ValueError):
        GaborParams(-1, 3)
    with pytest.raises(ValueError):
        GaborParams(10, 3, theta=math.pi)


def test_template_matches_scalar_oracle():
    tpl = build_template(10, 3, 12, 35)
    x, y = grid(35)
    for k in range(12):
        theta = k * math.pi / 12
        for i in range(0, 35, 3):
            for j in range(0, 35, 4):
                assert tpl[k, i, j] == pytest.approx(scalar_gabor(x[i, j], y[i, j], 10, 3, theta, 0.5), abs=1e-12)


def test_template_reference_values():
    tpl = build_template(10, 3, 12, 35)
    assert tpl.shape == (12, 35, 35)
    assert tpl[0, 17, 17] == 1.0
    assert tpl[0, 17, 17 + 5] == pytest.approx(-0.24935, abs=1e-5)


def test_single_direction_is_centrally_symmetric():
    tpl = build_template(7, 2, 1, 15)[0]
    np.testing.assert_array_equal(tpl, tpl[::-1, ::-1])


def test_quarter_turn_slice_is_transpose_with_flip():
    tpl = build_template(10, 3, 4, 21)
    zero, quarter = tpl[0], tpl[2]
    n = 21
    expected = np.array([[zero[n - 1 - j, i] for j in range(n)] for i in range(n)])
    np.testing.assert_allclose(quarter, expected, atol=1e-12)


def test_arc_shift_profile():
    assert arc_shift(0, 35) == 0
    r = 35 / 3
    assert arc_shift(r, 35) == pytest.approx(r)
    assert arc_shift(100, 35) == pytest.approx(r)
    assert arc_shift(-4, 35) == arc_shift(4, 35)


def test_curved_center_row_unchanged():
    straight = build_template(10, 3, 1, 35)[0]
    curved = build_curved_template(10, 3, 1, 35)[0]
    np.testing.assert_array_equal(curved[17], straight[17])


def test_curved_differs_from_straight():
    straight = build_template(10, 3, 12, 35)[0]
    curved = build_curved_template(10, 3, 12, 35)[0]
    assert np.abs(curved - straight).sum() > 0


def test_curved_rows_keep_straight_bound():
    straight = build_template(10, 3, 1, 35)[0]
    curved = curved_base(10, 3, 35)
    assert np.all(np.abs(curved).max(axis=1) <= np.abs(straight).max(axis=1) + 1e-15)


def test_curved_bend_flag_mirrors():
    a = curved_base(10, 3, 35, bend=1)
    b = curved_base(10, 3, 35, bend=-1)
    np.testing.assert_allclose(a, b[:, ::-1], atol=1e-15)


def test_curved_slices_are_rotations():
    tpl = build_curved_template(10, 3, 4, 35)
    np.testing.assert_allclose(tpl[2], rotate_kernel(tpl[0], math.pi / 2), atol=1e-12)
    # a quarter turn lands on grid points, so bilinear sampling is exact
    n = 35
    expected = np.array([[tpl[0][n - 1 - j, i] for j in range(n)] for i in range(n)])
    np.testing.assert_allclose(tpl[2], expected, atol=1e-9)


def test_rotating_straight_base_approximates_analytic():
    tpl = build_template(10, 3, 12, 35)
    rotated = rotate_kernel(tpl[0], math.pi / 12)
    assert np.abs(rotated - tpl[1]).max() < 0.1


def _arc_image(size, radius, width=1.5):
    """Dark circular arc through the image center, bulging like the curved filter."""
    half = (size - 1) / 2
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    cx, cy = half + radius, half
    dist = np.abs(np.hypot(xx - cx, yy - cy) - radius)
    return np.exp(-(dist / width) ** 2)


def test_curved_filter_prefers_arcs():
    size = 35
    img = _arc_image(81, size / 3)
    straight = build_template(10, 3, 1, size)[0]
    curved = build_curved_template(10, 3, 1, size)[0]
    r_straight = correlate2d(img, straight - straight.mean(), mode="same").max()
    r_curved = correlate2d(img, curved - curved.mean(), mode="same").max()
    assert r_curved > r_straight


def test_bank_full_cardinality():
    bank = build_bank(BankConfig(lambdas=(5, 10, 15), sigmas=(1, 3, 5), n_directions=12, size=35))
    assert bank.kernels.shape == (216, 35, 35)
    assert bank.grouped().shape == (18, 12, 35, 35)
    np.testing.assert_array_equal(bank.grouped().reshape(216, 35, 35), bank.kernels)


def test_bank_ordering():
    cfg = BankConfig(lambdas=(5, 10), sigmas=(1, 3), n_directions=3, size=11)
    bank = build_bank(cfg)
    kinds = [k.kind for k in bank.info]
    assert kinds == ["straight"] * 12 + ["curved"] * 12
    assert [(k.lam, k.sigma) for k in bank.info[:12:3]] == [(5, 1), (5, 3), (10, 1), (10, 3)]
    np.testing.assert_array_equal(bank.kernels[3:6], build_template(5, 3, 3, 11))
    np.testing.assert_array_equal(bank.kernels[12:15], build_curved_template(5, 1, 3, 11))


def test_bank_minimal_and_deterministic():
    cfg = BankConfig(lambdas=(10,), sigmas=(3,), n_directions=1, include_curved=False)
    assert len(build_bank(cfg)) == 1
    full = BankConfig()
    assert build_bank(full).kernels.tobytes() == build_bank(full).kernels.tobytes()


def test_bank_rejects_empty_sets():
    with pytest.raises(ValueError):
        BankConfig(lambdas=(), sigmas=(1,))
    with pytest.raises(ValueError):
        BankConfig(lambdas=(1,), sigmas=())


def test_listing_has_one_line_per_kernel():
    bank = build_bank(BankConfig(lambdas=(10,), sigmas=(3,), n_directions=4, size=11))
    lines = bank.listing().strip().splitlines()
    assert len(lines) == 1 + 8
    assert lines[5].split("\t")[:2] == ["4", "curved"]
