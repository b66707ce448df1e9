import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import bilinear_oracle, sim_matrix
from sren.errors import InvalidArgument, InvalidParameter
from sren.tensorcore import (IDENTITY, FeatureMap, bilinear_plan, bilinear_sample, circular_distance, compose,
                             interp_sample, make_sim2, warp, wrap_angle)

scales = st.floats(0.2, 5.0)
angles = st.floats(-10.0, 10.0)
shifts = st.tuples(st.floats(-20, 20), st.floats(-20, 20))


def gaussian(h=41, w=41, sigma=4.0, center=(0.0, 0.0)):
    rr, cc = np.meshgrid(np.arange(h) - (h - 1) / 2, np.arange(w) - (w - 1) / 2, indexing="ij")
    return np.exp(-((rr - center[0]) ** 2 + (cc - center[1]) ** 2) / (2 * sigma**2))


class TestSim2:
    def test_identity(self):
        T = make_sim2(1, 0, (0, 0))
        np.testing.assert_array_equal(T.matrix, np.eye(3))
        assert T.is_identity

    def test_pure_scale_inverse_divides(self):
        T = make_sim2(2, 0)
        np.testing.assert_allclose(T.apply_inverse(np.array([2.0, 2.0])), [1.0, 1.0])

    def test_compose_with_inverse_is_identity(self):
        T = make_sim2(2, math.pi / 2)
        np.testing.assert_allclose(compose(T, T.inverse()).matrix, np.eye(3), atol=1e-12)

    def test_nonpositive_scale_rejected(self):
        for s in (0.0, -1.0, float("nan")):
            with pytest.raises(InvalidParameter):
                make_sim2(s, 0.0)

    def test_theta_normalized(self):
        assert make_sim2(1, -math.pi / 2).theta == pytest.approx(3 * math.pi / 2)
        assert 0 <= make_sim2(1, 7 * math.pi).theta < 2 * math.pi

    def test_matrix_matches_factor_oracle(self):
        T = make_sim2(1.7, 0.9, (3.0, -2.0))
        np.testing.assert_allclose(T.matrix, sim_matrix(1.7, 0.9, (3.0, -2.0)), atol=1e-12)
        A, Y, R = T.factors()
        np.testing.assert_allclose(A @ Y @ R, T.matrix, atol=1e-12)

    def test_compose_identity(self):
        T = make_sim2(1.3, 2.0, (1.0, 4.0))
        np.testing.assert_allclose(compose(T, IDENTITY).matrix, T.matrix, atol=1e-12)

    def test_compose_angles_add(self):
        q = make_sim2(1, math.pi / 4)
        assert compose(q, q).theta == pytest.approx(math.pi / 2, abs=1e-12)

    def test_compose_random_pair(self, rng):
        a = make_sim2(rng.uniform(0.5, 2), rng.uniform(0, 6), rng.uniform(-5, 5, 2))
        b = make_sim2(rng.uniform(0.5, 2), rng.uniform(0, 6), rng.uniform(-5, 5, 2))
        c = compose(a, b)
        np.testing.assert_allclose(sim_matrix(c.s, c.theta, c.t), a.matrix @ b.matrix, atol=1e-10)

    def test_group_laws_on_many_transforms(self, rng):
        for _ in range(1000):
            a, b, c = (make_sim2(rng.uniform(0.3, 3), rng.uniform(0, 2 * math.pi), rng.uniform(-10, 10, 2))
                       for _ in range(3))
            np.testing.assert_allclose(a.matrix @ a.inverse_matrix, np.eye(3), atol=1e-12)
            left = compose(compose(a, b), c).matrix
            right = compose(a, compose(b, c)).matrix
            np.testing.assert_allclose(left, right, atol=1e-9)

    @given(scales, angles, shifts)
    def test_inverse_roundtrip_property(self, s, theta, t):
        T = make_sim2(s, theta, t)
        np.testing.assert_allclose(T.matrix @ T.inverse_matrix, np.eye(3), atol=1e-12 * max(1.0, s, 1 / s) * 30)
        p = np.array([1.5, -2.25])
        np.testing.assert_allclose(T.apply_inverse(T.apply(p)), p, atol=1e-9)

    @given(angles)
    def test_rotation_advances_polar_angle(self, alpha):
        T = make_sim2(1.0, alpha)
        p = T.apply(np.array([0.0, 1.0]))
        assert circular_distance(math.atan2(p[0], p[1]), alpha) < 1e-9


class TestAngles:
    def test_wrap(self):
        assert 0 <= wrap_angle(-1e-300) < 2 * math.pi
        np.testing.assert_allclose(wrap_angle(np.array([-math.pi, 3 * math.pi])), [math.pi, math.pi])

    def test_circular_distance(self):
        assert circular_distance(0.1, 2 * math.pi - 0.1) == pytest.approx(0.2)


class TestBilinear:
    def test_integer_location_is_exact(self, rng):
        f = FeatureMap(rng.random((2, 5, 6)))
        assert bilinear_sample(f, 1, (3, 4)) == f.data[1, 3, 4]

    def test_midpoint(self):
        f = FeatureMap(np.array([[0.0, 1.0]]))
        assert bilinear_sample(f, 0, (0, 0.5)) == pytest.approx(0.5)

    def test_outside_is_zero(self, rng):
        f = FeatureMap(rng.random((4, 4)))
        assert bilinear_sample(f, 0, (10.0, -7.0)) == 0.0

    def test_matches_direct_kernel_sum(self, rng):
        img = rng.random((6, 7))
        f = FeatureMap(img)
        for _ in range(50):
            y = rng.uniform(-1.5, 7.5, 2)
            assert bilinear_sample(f, 0, y) == pytest.approx(bilinear_oracle(img, y), abs=1e-12)

    @given(st.floats(0, 8.999), st.floats(0, 8.999))
    def test_interior_weights_partition_unity(self, r, c):
        _, w = bilinear_plan(np.array([r]), np.array([c]), 10, 10)
        assert np.all(w >= 0)
        assert w.sum() == pytest.approx(1.0, abs=1e-12)

    def test_interp_sample_record(self):
        s = interp_sample((1.25, 2.5), 5, 5)
        assert s.weights.sum() == pytest.approx(1.0)
        assert s.indices.tolist() == [[1, 2], [1, 3], [2, 2], [2, 3]]
        edge = interp_sample((4.5, 0.0), 5, 5)
        assert edge.weights.sum() == pytest.approx(0.5)


class TestFeatureMap:
    def test_rejects_nan(self):
        with pytest.raises(InvalidArgument):
            FeatureMap(np.array([[np.nan]]))

    def test_shape_and_origin(self):
        f = FeatureMap(np.zeros((3, 4, 6)))
        assert f.shape == (3, 4, 6) and f.channels == 3
        assert f.origin == (1.5, 2.5)
        assert f.data.size == f.channels * f.height * f.width

    def test_immutable(self):
        f = FeatureMap(np.zeros((2, 2)))
        with pytest.raises(ValueError):
            f.data[0, 0, 0] = 1.0


class TestWarp:
    def test_identity_exact(self, rng):
        f = FeatureMap(rng.random((2, 9, 9)))
        np.testing.assert_array_equal(warp(f, IDENTITY).data, f.data)

    def test_delta_rotates_quarter_turn(self):
        img = np.zeros((21, 21))
        img[10, 15] = 1.0  # offset (0, 5) from the origin
        out = warp(FeatureMap(img), make_sim2(1, math.pi / 2)).data[0]
        r, c = np.unravel_index(np.argmax(out), out.shape)
        assert (r - 10, c - 10) == (5, 0)
        assert out.sum() == pytest.approx(1.0)

    def test_quarter_turn_is_index_permutation(self, rng):
        img = rng.random((12, 12))
        out = warp(FeatureMap(img), make_sim2(1, math.pi / 2)).data[0]
        np.testing.assert_array_equal(out, np.rot90(img, -1))

    def test_roundtrip_on_smooth_image(self):
        f = FeatureMap(gaussian())
        T = make_sim2(1.3, 0.7, (1.5, -2.0))
        back = warp(warp(f, T), T.inverse()).data[0]
        assert np.max(np.abs(back - f.data[0])[8:-8, 8:-8]) <= 0.05

    def test_linearity(self, rng):
        f, g = rng.random((2, 15, 15)), rng.random((2, 15, 15))
        T = make_sim2(1.4, 1.1, (0.3, 2.0))
        lhs = warp(FeatureMap(2.0 * f - 3.0 * g), T).data
        rhs = 2.0 * warp(FeatureMap(f), T).data - 3.0 * warp(FeatureMap(g), T).data
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_composition(self):
        f = FeatureMap(gaussian(61, 61, 5.0, (3.0, -2.0)))
        t1 = make_sim2(1.2, 0.4, (1.0, 0.0))
        t2 = make_sim2(0.9, 1.3, (0.0, -2.0))
        two = warp(warp(f, t2), t1).data[0]
        one = warp(f, compose(t1, t2)).data[0]
        assert np.max(np.abs(two - one)[12:-12, 12:-12]) <= 0.05

    def test_out_of_support_is_zero(self):
        f = FeatureMap(np.ones((11, 11)))
        out = warp(f, make_sim2(1, 0, (30.0, 0.0))).data
        assert not out.any()
