"""Element mass data and kinetic energy in quaternion coordinates."""

import numpy as np
import pytest

from bdem.elements import ElementMass, ElementState, kinetic_energy, \
    rotational_mass_matrix, sphere_mass
from bdem.quat import quat_normalize, quat_rate

RNG = np.random.default_rng(7)


class TestSphereMass:
    def test_unit_sphere(self):
        m = sphere_mass(1.0, 1.0)
        assert m.rotational == pytest.approx(1.6)
        assert m.inertia == pytest.approx(0.4)

    def test_scaling(self):
        m = sphere_mass(2.0, 0.5)
        assert m.rotational == pytest.approx(0.8)

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            sphere_mass(0.0, 1.0)
        with pytest.raises(ValueError):
            sphere_mass(1.0, -0.2)

    def test_equivalent_mass_matrix_is_scaled_identity(self):
        # the literal matrix product, not the shortcut
        for _ in range(100):
            mass = sphere_mass(0.5 + RNG.random(), 0.2 + RNG.random())
            q = quat_normalize(RNG.normal(size=4))
            m4 = rotational_mass_matrix(q, mass)
            np.testing.assert_allclose(m4, mass.rotational * np.eye(4),
                                       atol=1e-12 * mass.rotational)


class TestKineticEnergy:
    def test_rest_state_zero(self):
        state = ElementState.at_rest([0.0, 0.0, 0.0])
        assert kinetic_energy(state, sphere_mass(2.0, 0.3)) == 0.0

    def test_translational_only(self):
        state = ElementState.at_rest([0.0, 0.0, 0.0])
        state.v = np.array([1.0, 0.0, 0.0])
        assert kinetic_energy(state, sphere_mass(2.0, 0.3)) == pytest.approx(1.0)

    def test_quaternion_path_equals_angular_energy(self):
        for _ in range(50):
            mass = sphere_mass(0.5 + RNG.random(), 0.2 + RNG.random())
            q = quat_normalize(RNG.normal(size=4))
            omega = RNG.normal(size=3)
            state = ElementState(np.zeros(3), q, np.zeros(3), quat_rate(q, omega))
            expected = 0.5 * mass.inertia * float(omega @ omega)
            assert kinetic_energy(state, mass) == pytest.approx(expected, rel=1e-12)

    def test_spin_about_z(self):
        mass = sphere_mass(1.3, 0.4)
        omega = 2.5
        q = quat_normalize(RNG.normal(size=4))
        state = ElementState(np.zeros(3), q, np.zeros(3),
                             quat_rate(q, np.array([0.0, 0.0, omega])))
        expected = 0.5 * 0.4 * 1.3 * 0.4**2 * omega**2
        assert kinetic_energy(state, mass) == pytest.approx(expected, rel=1e-12)

    def test_sign_flip_invariance(self):
        mass = sphere_mass(1.0, 0.5)
        q = quat_normalize(RNG.normal(size=4))
        qdot = quat_rate(q, RNG.normal(size=3))
        a = kinetic_energy(ElementState(np.zeros(3), q, np.zeros(3), qdot), mass)
        b = kinetic_energy(ElementState(np.zeros(3), -q, np.zeros(3), -qdot), mass)
        assert a == pytest.approx(b, rel=1e-14)

    def test_nonnegative_and_zero_iff_at_rest(self):
        mass = sphere_mass(1.0, 0.5)
        for _ in range(20):
            v = RNG.normal(size=3) * (RNG.random() > 0.5)
            qdot = RNG.normal(size=4) * (RNG.random() > 0.5)
            state = ElementState(np.zeros(3), np.array([0, 0, 0, 1.0]), v, qdot)
            e = kinetic_energy(state, mass)
            assert e >= 0.0
            if np.any(v != 0.0) or np.any(qdot != 0.0):
                assert e > 0.0
