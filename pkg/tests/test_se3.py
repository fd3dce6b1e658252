from __future__ import annotations

import time

import numpy as np
import pytest
from conftest import random_rotation, random_transform, rel_err
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm, logm

from trograph import se3


def twist_matrix(psi):
    m = np.zeros((4, 4))
    m[:3, :3] = se3.skew(psi[3:])
    m[:3, 3] = psi[:3]
    return m


def rodrigues(axis, angle):
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def random_psi(rng, n, max_angle=3.0):
    rho = rng.normal(size=(n, 3))
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    theta = v * rng.uniform(0, max_angle, size=(n, 1))
    return np.concatenate([rho, theta], axis=1)


finite6 = arrays(np.float64, 6, elements=st.floats(-3.0, 3.0))


class TestExpLog:
    def test_zero_is_identity(self):
        assert np.array_equal(se3.exp_map(np.zeros(6)), np.eye(4))

    def test_quarter_turn_about_z(self):
        T = se3.exp_map(np.array([0, 0, 0, 0, 0, np.pi / 2]))
        np.testing.assert_allclose(T[:3, :3], rodrigues([0, 0, 1], np.pi / 2), atol=1e-15)
        np.testing.assert_allclose(T[:3, :3], [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-15)
        np.testing.assert_allclose(T[:3, 3], 0.0)

    def test_pure_translation(self):
        T = se3.exp_map(np.array([1.0, 2.0, 3.0, 0, 0, 0]))
        np.testing.assert_array_equal(T[:3, :3], np.eye(3))
        np.testing.assert_array_equal(T[:3, 3], [1, 2, 3])

    def test_matches_matrix_exponential(self, rng):
        for psi in random_psi(rng, 200):
            np.testing.assert_allclose(se3.exp_map(psi), expm(twist_matrix(psi)), atol=1e-12)

    def test_small_angle_branch_matches_matrix_exponential(self, rng):
        for scale in (1e-3, 1e-6, 1e-9, 1e-12):
            psi = np.concatenate([rng.normal(size=3), rng.normal(size=3) * scale])
            np.testing.assert_allclose(se3.exp_map(psi), expm(twist_matrix(psi)), atol=1e-14)

    def test_log_identity(self):
        assert np.array_equal(se3.log_map(np.eye(4)), np.zeros(6))

    def test_round_trip_1000(self, rng):
        psi = random_psi(rng, 1000)
        assert np.abs(se3.log_map(se3.exp_map(psi)) - psi).max() < 1e-9

    def test_log_matches_matrix_logarithm(self, rng):
        for psi in random_psi(rng, 50, max_angle=2.5):
            T = se3.exp_map(psi)
            L = np.real(logm(T))
            np.testing.assert_allclose(se3.log_map(T), np.concatenate([L[:3, 3], se3.vee(L[:3, :3])]), atol=1e-9)

    def test_near_pi_raises(self):
        T = se3.make_transform(rodrigues([0, 0, 1], np.pi - 1e-12))
        with pytest.raises(se3.NearSingularityError):
            se3.log_map(T)

    def test_near_pi_axis_fallback(self):
        R = rodrigues([1, 2, 3], np.pi - 1e-12)
        theta = se3.so3_log(R, singular="axis")
        assert abs(np.linalg.norm(theta) - np.pi) < 1e-6
        np.testing.assert_allclose(se3.so3_exp(theta), R, atol=1e-6)

    def test_just_outside_band_round_trips(self):
        theta = np.array([0.0, 0.6, 0.8]) * (np.pi - 1e-4)
        np.testing.assert_allclose(se3.so3_log(se3.so3_exp(theta)), theta, atol=1e-9)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            se3.exp_map(np.array([np.nan, 0, 0, 0, 0, 0]))

    @settings(max_examples=200, deadline=None)
    @given(finite6)
    def test_round_trip_property(self, psi):
        if np.linalg.norm(psi[3:]) > np.pi - 1e-3:
            psi = psi.copy()
            psi[3:] *= (np.pi - 1e-3) / np.linalg.norm(psi[3:])
        np.testing.assert_allclose(se3.log_map(se3.exp_map(psi)), psi, atol=1e-9)

    def test_output_is_valid_transform(self, rng):
        for psi in random_psi(rng, 100):
            assert se3.is_valid_transform(se3.exp_map(psi))


class TestGroup:
    def test_identity_laws(self, rng):
        T = random_transform(rng)
        np.testing.assert_array_equal(se3.compose(np.eye(4), T), T)
        np.testing.assert_array_equal(se3.inverse(np.eye(4)), np.eye(4))

    def test_inverse_round_trip(self, rng):
        for _ in range(100):
            T = random_transform(rng)
            np.testing.assert_allclose(se3.compose(T, se3.inverse(T)), np.eye(4), atol=1e-12)
            np.testing.assert_allclose(se3.compose(se3.inverse(T), T), np.eye(4), atol=1e-12)

    def test_associative(self, rng):
        for _ in range(100):
            a, b, c = (random_transform(rng) for _ in range(3))
            np.testing.assert_allclose(se3.compose(se3.compose(a, b), c), se3.compose(a, se3.compose(b, c)), atol=1e-12)

    def test_adjoint_maps_twists(self, rng):
        T = random_transform(rng)
        xi = rng.normal(size=6)
        lhs = T @ twist_matrix(xi) @ se3.inverse(T)
        np.testing.assert_allclose(twist_matrix(se3.adjoint(T) @ xi), lhs, atol=1e-12)

    def test_left_jacobian_first_order(self, rng):
        # exp(psi + d) ~= exp(J d) exp(psi)
        psi = random_psi(rng, 1, 2.5)[0]
        d = rng.normal(size=6) * 1e-6
        lhs = se3.exp_map(psi + d)
        rhs = se3.exp_map(se3.se3_left_jacobian(psi) @ d) @ se3.exp_map(psi)
        assert np.abs(lhs - rhs).max() < 1e-11


class TestGeodesic:
    def test_self_distance_zero(self, rng):
        R = random_rotation(rng)
        assert se3.geodesic_so3(R, R) == pytest.approx(0.0, abs=1e-7)

    def test_quarter_and_half_turns(self):
        assert se3.geodesic_so3(np.eye(3), rodrigues([0, 0, 1], np.pi / 2)) == pytest.approx(np.pi / 2, abs=1e-12)
        assert se3.geodesic_so3(np.eye(3), rodrigues([0, 0, 1], np.pi)) == pytest.approx(np.pi, abs=1e-12)

    def test_clamps_trace(self):
        R = np.eye(3) * (1 + 1e-15)
        assert np.isfinite(se3.geodesic_so3(R, np.eye(3)))

    def test_metric_axioms(self, rng):
        for _ in range(200):
            a, b, c = (random_rotation(rng) for _ in range(3))
            dab = se3.geodesic_so3(a, b)
            assert 0.0 <= dab <= np.pi
            assert dab == pytest.approx(se3.geodesic_so3(b, a), abs=1e-9)
            assert dab <= se3.geodesic_so3(a, c) + se3.geodesic_so3(c, b) + 1e-9

    def test_gradient_matches_finite_differences(self, rng):
        h = 1e-6
        for _ in range(30):
            theta = random_psi(rng, 1, 2.5)[0][3:]
            r_ref = random_rotation(rng)
            value, grad = se3.geodesic_so3_grad(theta, r_ref)
            if value < 0.05 or value > np.pi - 0.05:
                continue
            fd = np.array([
                (se3.geodesic_so3(se3.so3_exp(theta + h * e), r_ref) - se3.geodesic_so3(se3.so3_exp(theta - h * e), r_ref)) / (2 * h)
                for e in np.eye(3)
            ])
            assert rel_err(grad, fd) < 1e-5


def test_round_trip_speed(rng):
    psi = random_psi(rng, 10_000)
    t0 = time.perf_counter()
    err = np.abs(se3.log_map(se3.exp_map(psi)) - psi).max()
    assert time.perf_counter() - t0 < 1.0
    assert err < 1e-9
