import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.ndimage import gaussian_filter

from sren.equivariance import geometry_covariance
from sren.errors import InvalidArgument, InvalidParameter
from sren.fourier_argand import BasisConfig, build_basis
from sren.geometry import (GeometryField, ResponseStack, basis_responses, build_search_grid, channel_reduce,
                           compute_geometry, default_threshold, estimate_geometry, geometry_to_matrices,
                           matrices_from, score_field)
from sren.tensorcore import FeatureMap, make_sim2

CFG = BasisConfig()
BASIS = build_basis(CFG)
GRID = build_search_grid(CFG)


def texture(n=72, seed=0, sigma=1.5):
    return gaussian_filter(np.random.default_rng(seed).standard_normal((n, n)), sigma)


def brute_response(img, atom, mask, r, c):
    """Direct normalized correlation at one pixel, edge padding."""
    p = mask.shape[0]
    half = p // 2
    pad = np.pad(img - img.min(), half, mode="edge")
    win = pad[r : r + p, c : c + p][mask]
    a = atom[mask]
    mu_i, sd_i = win.mean(), win.std()
    mu_h = a.mean()
    sd_h = np.sqrt(np.mean(np.abs(a - mu_h) ** 2))
    return (np.mean(win * a) - mu_i * mu_h) / (sd_i * sd_h)


class TestResponses:
    def test_constant_image(self):
        stack = basis_responses(np.full((30, 30), 0.7), BASIS)
        assert not np.any(stack.responses)
        assert not stack.valid.any()

    def test_matches_brute_force(self):
        img = texture(40)
        stack = basis_responses(img, BASIS)
        for r, c in [(0, 0), (20, 17), (39, 5), (11, 38)]:
            for k in [(0, 0), (1, -1), (2, 2), (-2, 1)]:
                ref = brute_response(img, BASIS.atom(*k), BASIS.mask, r, c)
                assert stack.response(*k)[r, c] == pytest.approx(ref, abs=1e-10)

    def test_matched_filter_peak(self):
        img = np.zeros((45, 45))
        img[15:30, 15:30] = BASIS.atom(1, 0).real
        stack = basis_responses(img, BASIS)
        mags = np.abs(stack.responses)
        assert mags[CFG.orders.index((1, 0)), 22, 22] == pytest.approx(mags.max())

    def test_smaller_than_patch_rejected(self):
        with pytest.raises(InvalidArgument):
            basis_responses(np.ones((10, 40)), BASIS)

    @given(st.integers(0, 10**6), st.floats(0.3, 3.0))
    def test_normalized_bound(self, seed, sigma):
        img = gaussian_filter(np.random.default_rng(seed).standard_normal((32, 32)), sigma)
        stack = basis_responses(img, BASIS)
        assert np.abs(stack.responses[:, stack.valid]).max() <= 1 + 1e-9

    def test_affine_intensity_invariance(self):
        img = texture(40)
        a = basis_responses(img, BASIS).responses
        b = basis_responses(3.0 * img + 5.0, BASIS).responses
        np.testing.assert_allclose(a, b, atol=1e-9)


class TestSearchGrid:
    def test_unit_entry(self):
        li = int(np.argmin(np.abs(GRID.lambdas - 1.0)))
        assert GRID.lambdas[li] == pytest.approx(1.0)
        np.testing.assert_allclose(GRID.table[li, 0], 1.0, atol=1e-15)

    def test_half_turn_phase(self):
        li = int(np.argmin(np.abs(GRID.lambdas - 1.0)))
        gi = int(np.argmin(np.abs(GRID.gammas - math.pi)))
        assert GRID.table[li, gi, CFG.orders.index((1, 0))] == pytest.approx(-1.0, abs=1e-15)

    def test_magnitude_is_lambda(self):
        np.testing.assert_allclose(np.abs(GRID.table[-1]), 2.0, rtol=1e-13)

    def test_layout(self):
        assert len(GRID.lambdas) == 9 and len(GRID.gammas) == 16
        assert GRID.gammas[0] == 0.0 and GRID.gammas[-1] < 2 * math.pi
        np.testing.assert_allclose(np.diff(np.log(GRID.lambdas)), GRID.log_lambda_step)

    @pytest.mark.parametrize("rng_", [(0.0, 1.0), (2.0, 1.0), (-1.0, 2.0)])
    def test_invalid_range(self, rng_):
        with pytest.raises(InvalidParameter):
            build_search_grid(CFG, lambda_range=rng_)


class TestEstimate:
    def test_constant_image(self):
        field = compute_geometry(np.ones((32, 32)), BASIS, GRID)
        assert not field.confidence.any()
        np.testing.assert_array_equal(field.matrices, np.broadcast_to(np.eye(2), (32, 32, 2, 2)))

    def test_range_invariants(self):
        field = compute_geometry(texture(48), BASIS, GRID)
        assert field.scale.min() >= GRID.lambdas[0] and field.scale.max() <= GRID.lambdas[-1]
        assert field.orientation.min() >= 0 and field.orientation.max() < 2 * math.pi
        np.testing.assert_array_equal(field.matrices[~field.confidence], np.broadcast_to(np.eye(2), (int((~field.confidence).sum()), 2, 2)))

    def test_quarter_turn_covariance(self):
        f = FeatureMap(texture(96, seed=3))
        rep = geometry_covariance(f, make_sim2(1.0, math.pi / 2), BASIS, GRID, crop=26)
        assert rep.pixels > 500
        assert rep.orientation_match >= 0.9

    def test_scale_covariance(self):
        # the estimator's claimed scale covariance: Lambda ratio 1.5 within one grid step
        f = FeatureMap(texture(96, seed=3))
        rep = geometry_covariance(f, make_sim2(1.5, 0.0), BASIS, GRID, crop=26)
        assert rep.scale_match >= 0.9, rep

    def test_score_linearity(self):
        stack = basis_responses(texture(40), BASIS)
        doubled = ResponseStack(2 * stack.responses, stack.local_mean, stack.local_std, stack.valid, stack.orders)
        np.testing.assert_allclose(score_field(doubled, GRID), 2 * score_field(stack, GRID), rtol=1e-13, atol=1e-13)
        a = estimate_geometry(stack, GRID, 0.0)
        b = estimate_geometry(doubled, GRID, 0.0)
        np.testing.assert_array_equal(a.scale, b.scale)
        np.testing.assert_array_equal(a.orientation, b.orientation)

    def test_tie_break_smallest_index(self):
        stack = basis_responses(np.ones((20, 20)), BASIS)
        valid = np.ones_like(stack.valid)
        flat = ResponseStack(stack.responses, stack.local_mean, stack.local_std, valid, stack.orders)
        field = estimate_geometry(flat, GRID, 0.0)
        assert np.all(field.scale == GRID.lambdas[0]) and np.all(field.orientation == 0.0)

    def test_deterministic(self):
        img = texture(40, seed=9)
        a, b = compute_geometry(img, BASIS, GRID), compute_geometry(img, BASIS, GRID)
        np.testing.assert_array_equal(a.scale, b.scale)
        np.testing.assert_array_equal(a.orientation, b.orientation)
        np.testing.assert_array_equal(a.confidence, b.confidence)

    def test_mismatched_grid(self):
        stack = basis_responses(texture(40), BASIS)
        with pytest.raises(InvalidArgument):
            estimate_geometry(stack, build_search_grid(BasisConfig(K1=1)))

    def test_default_threshold(self):
        assert default_threshold(CFG) == pytest.approx(0.05 * 25)


class TestMatrices:
    def test_identity(self):
        m = matrices_from(np.ones((1, 1)), np.zeros((1, 1)), np.ones((1, 1), bool))
        np.testing.assert_array_equal(m[0, 0], np.eye(2))

    def test_scaled_quarter_turn(self):
        m = matrices_from(np.full((1, 1), 2.0), np.full((1, 1), math.pi / 2), np.ones((1, 1), bool))
        np.testing.assert_array_equal(m[0, 0], 2 * np.array([[0.0, 1.0], [-1.0, 0.0]]))

    def test_low_confidence_identity(self):
        m = matrices_from(np.full((1, 1), 2.0), np.full((1, 1), 1.0), np.zeros((1, 1), bool))
        np.testing.assert_array_equal(m[0, 0], np.eye(2))

    def test_field_roundtrip(self):
        f = GeometryField.constant(3, 4, 1.5, 0.4)
        np.testing.assert_array_equal(geometry_to_matrices(f), f.matrices)
        c, s = math.cos(0.4), math.sin(0.4)
        np.testing.assert_allclose(f.matrices[1, 2], 1.5 * np.array([[c, s], [-s, c]]))


class TestChannelReduce:
    def test_single(self, rng):
        x = rng.random((1, 5, 5))
        np.testing.assert_array_equal(channel_reduce(FeatureMap(x)), x[0])

    def test_opposite_channels(self, rng):
        x = rng.random((5, 5))
        assert not channel_reduce(np.stack([x, -x])).any()

    def test_mean(self, rng):
        x = rng.random((3, 4, 4))
        np.testing.assert_allclose(channel_reduce(x), (x[0] + x[1] + x[2]) / 3, atol=1e-15)
