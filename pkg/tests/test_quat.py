"""Quaternion algebra: multiplication matrices, nullspace operators,
rotation, angular velocity, geodesic updates."""

import numpy as np
import pytest

from bdem.quat import (
    IDENTITY,
    NonTangentRateError,
    ZeroQuaternionError,
    angular_velocity,
    from_axis_angle,
    geodesic_step,
    left_matrix,
    nullspace_left,
    nullspace_right,
    quat_conj,
    quat_mul,
    quat_normalize,
    quat_rate,
    right_matrix,
    rotate_vec,
    shortest_arc,
    tangent_project,
    unit_constraint,
)

RNG = np.random.default_rng(101)


def rotmat(q):
    """Independent rotation-matrix oracle (standard component formula)."""
    x, y, z, w = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_unit(n=None):
    shape = (4,) if n is None else (n, 4)
    return quat_normalize(RNG.normal(size=shape))


class TestMultiplication:
    def test_identity_two_sided(self):
        q = random_unit()
        np.testing.assert_allclose(quat_mul(IDENTITY, q), q, atol=1e-15)
        np.testing.assert_allclose(quat_mul(q, IDENTITY), q, atol=1e-15)

    def test_conjugate_gives_identity(self):
        for _ in range(20):
            q = random_unit()
            np.testing.assert_allclose(quat_mul(quat_conj(q), q), IDENTITY, atol=1e-14)
            np.testing.assert_allclose(quat_mul(q, quat_conj(q)), IDENTITY, atol=1e-14)

    def test_composition_matches_rotation_matrix_oracle(self):
        qz = from_axis_angle([0, 0, 1], np.pi / 2)
        q2 = quat_mul(qz, qz)
        expected = rotmat(qz) @ rotmat(qz)
        np.testing.assert_allclose(rotmat(q2), expected, atol=1e-12)

    def test_matrix_forms_agree_with_product(self):
        for _ in range(100):
            a, b = random_unit(), random_unit()
            ab = quat_mul(a, b)
            np.testing.assert_allclose(left_matrix(a) @ b, ab, atol=1e-13)
            np.testing.assert_allclose(right_matrix(b) @ a, ab, atol=1e-13)

    def test_associativity(self):
        a, b, c = random_unit(30), random_unit(30), random_unit(30)
        lhs = quat_mul(quat_mul(a, b), c)
        rhs = quat_mul(a, quat_mul(b, c))
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_unit_times_unit_is_unit(self):
        a, b = random_unit(50), random_unit(50)
        norms = np.linalg.norm(quat_mul(a, b), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-13)


class TestMatrices:
    def test_identity_matrices(self):
        np.testing.assert_allclose(left_matrix(IDENTITY), np.eye(4), atol=0)
        np.testing.assert_allclose(right_matrix(IDENTITY), np.eye(4), atol=0)

    def test_orthogonal_for_unit_quaternions(self):
        for _ in range(50):
            q = random_unit()
            for m in (left_matrix(q), right_matrix(q)):
                np.testing.assert_allclose(m.T @ m, np.eye(4), atol=1e-9)

    def test_stacked_nullspace_recovers_multiplication_matrices(self):
        for _ in range(20):
            q = random_unit()
            np.testing.assert_allclose(
                left_matrix(q), np.column_stack([nullspace_left(q).T, q]), atol=1e-15)
            np.testing.assert_allclose(
                right_matrix(q), np.column_stack([nullspace_right(q).T, q]), atol=1e-15)


class TestNullspace:
    def test_identity_reduces_to_selector(self):
        np.testing.assert_allclose(
            nullspace_left(IDENTITY), np.hstack([np.eye(3), np.zeros((3, 1))]), atol=0)

    def test_annihilates_base_quaternion(self):
        q = random_unit(100)
        for op in (nullspace_left, nullspace_right):
            prod = np.einsum("bij,bj->bi", op(q), q)
            assert np.abs(prod).max() < 1e-12

    def test_rows_orthonormal(self):
        q = random_unit(100)
        g = nullspace_left(q)
        gram = g @ np.swapaxes(g, 1, 2)
        assert np.abs(gram - np.eye(3)).max() < 1e-10

    def test_transpose_product_is_tangent_projector(self):
        q = random_unit(100)
        g = nullspace_left(q)
        proj = np.eye(4) - q[:, :, None] * q[:, None, :]
        assert np.abs(np.swapaxes(g, 1, 2) @ g - proj).max() < 1e-10


class TestRotate:
    def test_identity_rotation(self):
        np.testing.assert_allclose(rotate_vec(IDENTITY, [1.0, 2.0, 3.0]),
                                   [1.0, 2.0, 3.0], atol=0)

    def test_axis_rotation_against_matrix_oracle(self):
        q = from_axis_angle([0, 0, 1], np.pi / 2)
        np.testing.assert_allclose(rotate_vec(q, [1.0, 0.0, 0.0]),
                                   [0.0, 1.0, 0.0], atol=1e-15)
        for _ in range(50):
            q = random_unit()
            d = RNG.normal(size=3)
            np.testing.assert_allclose(rotate_vec(q, d), rotmat(q) @ d, atol=1e-12)

    def test_norm_preserved(self):
        q = random_unit(1000)
        d = RNG.normal(size=(1000, 3))
        np.testing.assert_allclose(
            np.linalg.norm(rotate_vec(q, d), axis=1),
            np.linalg.norm(d, axis=1), atol=1e-9)

    def test_composition_property(self):
        a, b = random_unit(50), random_unit(50)
        d = RNG.normal(size=(50, 3))
        lhs = rotate_vec(quat_mul(a, b), d)
        rhs = rotate_vec(a, rotate_vec(b, d))
        assert np.abs(lhs - rhs).max() < 1e-10


class TestAngularVelocity:
    def test_zero_rate(self):
        q = random_unit()
        np.testing.assert_allclose(angular_velocity(q, np.zeros(4)), np.zeros(3), atol=0)

    def test_finite_difference_spin(self):
        omega = 3.7
        dt = 1e-5
        t = 0.42

        def q_of(t):
            return from_axis_angle([0, 0, 1], omega * t)

        qdot = (q_of(t + dt) - q_of(t - dt)) / (2 * dt)
        w = angular_velocity(q_of(t), qdot)
        np.testing.assert_allclose(w, [0, 0, omega], atol=omega * dt**2 * 10 + 1e-9)

    def test_round_trip_exact(self):
        for _ in range(50):
            q = random_unit()
            w = RNG.normal(size=3)
            np.testing.assert_allclose(angular_velocity(q, quat_rate(q, w)), w,
                                       atol=1e-13)

    def test_strict_mode_rejects_radial_rate(self):
        q = random_unit()
        with pytest.raises(NonTangentRateError):
            angular_velocity(q, q.copy(), strict=True)

    def test_loose_mode_projects(self):
        q = random_unit()
        w = RNG.normal(size=3)
        qdot = quat_rate(q, w) + 0.05 * q
        np.testing.assert_allclose(angular_velocity(q, qdot), w, atol=1e-12)


class TestGeodesic:
    def test_zero_step(self):
        q = random_unit()
        np.testing.assert_allclose(geodesic_step(q, np.zeros(4)), q, atol=0)

    def test_quarter_turn_lands_on_pole(self):
        dq = np.array([np.pi / 2, 0.0, 0.0, 0.0])
        np.testing.assert_allclose(geodesic_step(IDENTITY, dq),
                                   [1.0, 0.0, 0.0, 0.0], atol=1e-15)

    def test_stays_on_sphere(self):
        q = random_unit(1000)
        dq = tangent_project(q, RNG.normal(size=(1000, 4)))
        out = geodesic_step(q, dq)
        assert np.abs(np.linalg.norm(out, axis=1) - 1.0).max() < 1e-12


class TestNormalize:
    def test_scales_to_unit(self):
        np.testing.assert_allclose(quat_normalize([0.0, 0.0, 0.0, 2.0]),
                                   IDENTITY, atol=0)

    def test_unit_unchanged(self):
        q = random_unit()
        np.testing.assert_allclose(quat_normalize(q), q, atol=1e-15)

    def test_scale_invariant(self):
        q = RNG.normal(size=4)
        for c in (0.1, 3.0, 1e6):
            np.testing.assert_allclose(quat_normalize(c * q), quat_normalize(q),
                                       atol=1e-14)

    def test_zero_raises(self):
        with pytest.raises(ZeroQuaternionError):
            quat_normalize(np.zeros(4))


class TestConstraint:
    def test_values(self):
        assert abs(unit_constraint(random_unit())) < 1e-14
        assert unit_constraint(np.array([0.0, 0.0, 0.0, 2.0])) == pytest.approx(1.5)
        assert unit_constraint(np.zeros(4)) == pytest.approx(-0.5)


def test_shortest_arc_maps_and_handles_antipodal():
    ex = np.array([1.0, 0.0, 0.0])
    for _ in range(50):
        d = RNG.normal(size=3)
        d /= np.linalg.norm(d)
        q = shortest_arc(ex, d)
        np.testing.assert_allclose(rotate_vec(q, ex), d, atol=1e-12)
    q = shortest_arc(ex, -ex)
    np.testing.assert_allclose(rotate_vec(q, ex), -ex, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(q), 1.0, atol=1e-15)
