"""Bond potentials, stress evaluation, fracture criteria, and plasticity."""

import math

import numpy as np
import pytest

from bdem.bonds import (
    BondParams,
    BondRest,
    BondState,
    BrokenBondError,
    DegenerateBondError,
    DegenerateShearError,
    PlasticParams,
    WEAKENED,
    BROKEN,
    bendtwist_potential,
    bond_stress,
    fracture_check,
    plastic_update,
    rest_frame,
    shear_potential,
    stretch_potential,
    von_mises,
)
from bdem.quat import IDENTITY, from_axis_angle, quat_mul, quat_normalize, \
    rotate_vec, shortest_arc

RNG = np.random.default_rng(2024)

EX = np.array([1.0, 0.0, 0.0])


def make_rest(d0):
    d0 = np.asarray(d0, dtype=float)
    d0 = d0 / np.linalg.norm(d0)
    q0 = shortest_arc(EX, d0)
    return BondRest(d0=d0, q0=q0, frame=rest_frame(q0))


def make_params(**kw):
    defaults = dict(youngs=1e7, shear_modulus=4e6, rest_length=0.1, radius=0.02)
    defaults.update(kw)
    return BondParams(**defaults)


def fd_gradient(f, x, h):
    g = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_hessian(f, x, h):
    n = x.size
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            ei = np.zeros(n)
            ei[i] = h
            ej = np.zeros(n)
            ej[j] = h
            out[i, j] = (f(x + ei + ej) - f(x + ei - ej)
                         - f(x - ei + ej) + f(x - ei - ej)) / (4 * h * h)
    return out


def random_nearby_quats(spread=0.4):
    q_i = quat_normalize(RNG.normal(size=4))
    q_j = quat_normalize(q_i + spread * RNG.normal(size=4))
    return q_i, q_j


class TestStretch:
    def test_rest_configuration_zero(self):
        params = make_params()
        rest = make_rest(EX)
        e, g, _ = stretch_potential(np.zeros(3), EX * params.rest_length, rest, params)
        assert e == 0.0
        np.testing.assert_allclose(g, np.zeros(6), atol=0)

    def test_one_percent_elongation_energy(self):
        # bond geometry from a pair of unit-edge tets sharing a face
        from bdem.geometry import TetMesh, build_elements_and_bonds
        verts = np.array([
            [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0],
            [0.0, 0.0, 1.0], [1.0, 1.0, 1.0],
        ])
        mesh = TetMesh(verts, np.array([[0, 1, 2, 3], [1, 2, 3, 4]]))
        elements, bonds = build_elements_and_bonds(mesh, 2500.0, 1e7, 4e6)
        assert bonds.n == 1
        l0 = bonds.rest_length[0]
        params = BondParams(1e7, 4e6, l0, bonds.radius[0])
        rest = make_rest(bonds.d0[0])
        p_i = elements.p[0]
        p_j = p_i + bonds.d0[0] * l0 * 1.01
        e, _, _ = stretch_potential(p_i, p_j, rest, params)
        k_n = 1e7 * math.pi * bonds.radius[0] ** 2 / l0
        assert e == pytest.approx(0.5 * k_n * (0.01 * l0) ** 2, rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        params = make_params()
        rest = make_rest(EX)
        l0 = params.rest_length
        worst = 0.0
        for _ in range(100):
            p_i = RNG.normal(size=3) * 0.2
            d = RNG.normal(size=3)
            d /= np.linalg.norm(d)
            p_j = p_i + d * l0 * (1.0 + 0.3 * RNG.normal())
            _, g, h = stretch_potential(p_i, p_j, rest, params)

            def f(x):
                return stretch_potential(x[:3], x[3:], rest, params)[0]

            x = np.concatenate([p_i, p_j])
            gf = fd_gradient(f, x, 1e-6 * l0)
            worst = max(worst, np.abs(g - gf).max() / np.abs(gf).max())
            hf = fd_hessian(f, x, 1e-4 * l0)
            assert np.abs(h - hf).max() / np.abs(hf).max() < 1e-3
        assert worst < 1e-4

    def test_coincident_endpoints_raise(self):
        params = make_params()
        rest = make_rest(EX)
        with pytest.raises(DegenerateBondError):
            stretch_potential(np.zeros(3), np.zeros(3), rest, params)


class TestShear:
    def test_identity_pair_zero(self):
        params = make_params()
        rest = make_rest(EX)
        e, g, _ = shear_potential(IDENTITY, IDENTITY, rest, params)
        assert e == 0.0
        np.testing.assert_allclose(g, np.zeros(8), atol=1e-12)

    def test_perpendicular_rotation_gives_angle(self):
        params = make_params()
        rest = make_rest(EX)
        k_t = params.shear_stiffness
        for phi in (0.05, 0.3, 1.2):
            q = from_axis_angle([0.0, 1.0, 0.0], phi)   # axis perpendicular to d0
            e, _, _ = shear_potential(q, q, rest, params)
            assert e == pytest.approx(0.5 * k_t * phi**2, rel=1e-10)

    def test_pure_twist_has_no_shear(self):
        params = make_params()
        rest = make_rest(EX)
        q = from_axis_angle(rest.d0, 0.8)
        e, g, _ = shear_potential(q, q, rest, params)
        assert e < 1e-18
        assert np.abs(g).max() < 1e-9

    def test_antipodal_raises(self):
        params = make_params()
        rest = make_rest(EX)
        q = quat_normalize(RNG.normal(size=4))
        with pytest.raises(DegenerateShearError):
            shear_potential(q, -q, rest, params)

    def test_derivatives_match_finite_differences(self):
        params = make_params()
        rest = make_rest(RNG.normal(size=3))
        worst_g = worst_h = 0.0
        for _ in range(100):
            q_i, q_j = random_nearby_quats()
            _, g, h = shear_potential(q_i, q_j, rest, params)

            def f(x):
                return shear_potential(x[:4], x[4:], rest, params)[0]

            x = np.concatenate([q_i, q_j])
            gf = fd_gradient(f, x, 1e-6)
            worst_g = max(worst_g, np.abs(g - gf).max() / max(np.abs(gf).max(), 1e-9))
            hf = fd_hessian(f, x, 1e-4)
            worst_h = max(worst_h, np.abs(h - hf).max() / np.abs(hf).max())
        assert worst_g < 1e-4
        assert worst_h < 1e-3


class TestBendTwist:
    def test_equal_orientations_zero(self):
        params = make_params()
        rest = make_rest(RNG.normal(size=3))
        q = quat_normalize(RNG.normal(size=4))
        e, g, _ = bendtwist_potential(q, q, rest, params)
        assert abs(e) < 1e-18
        assert np.abs(g).max() < 1e-9

    def test_pure_twist_energy(self):
        # relative twist by phi about the bond axis; the deformation vector
        # has magnitude sin(phi/2) purely along the twist component, checked
        # against a rotation constructed independently
        params = make_params()
        d0 = np.array([0.0, 1.0, 0.0])
        rest = make_rest(d0)
        k_twist = params.twist_bend_stiffness()[0]
        for phi in (0.1, 0.6, 1.5):
            q_j = IDENTITY
            q_i = from_axis_angle(d0, phi)
            e, _, _ = bendtwist_potential(q_i, q_j, rest, params)
            assert e == pytest.approx(0.5 * k_twist * math.sin(phi / 2) ** 2,
                                      rel=1e-10)

    def test_twist_energy_transported_frames(self):
        # same relative twist applied on top of a common rotation
        params = make_params()
        rest = make_rest(EX)
        k_twist = params.twist_bend_stiffness()[0]
        common = quat_normalize(RNG.normal(size=4))
        phi = 0.7
        q_j = common
        q_i = quat_mul(common, from_axis_angle(EX, phi))
        e, _, _ = bendtwist_potential(q_i, q_j, rest, params)
        assert e == pytest.approx(0.5 * k_twist * math.sin(phi / 2) ** 2, rel=1e-10)

    def test_derivatives_match_finite_differences(self):
        params = make_params()
        rest = make_rest(RNG.normal(size=3))
        worst_h = 0.0
        for _ in range(100):
            q_i, q_j = random_nearby_quats()
            _, g, h = bendtwist_potential(q_i, q_j, rest, params)
            np.testing.assert_allclose(h, h.T, atol=1e-9 * max(1.0, np.abs(h).max()))

            def f(x):
                return bendtwist_potential(x[:4], x[4:], rest, params)[0]

            x = np.concatenate([q_i, q_j])
            gf = fd_gradient(f, x, 1e-6)
            assert np.abs(g - gf).max() / max(np.abs(gf).max(), 1e-9) < 1e-4
            hf = fd_hessian(f, x, 1e-4)
            worst_h = max(worst_h, np.abs(h - hf).max() / np.abs(hf).max())
        assert worst_h < 1e-3


class TestInvariance:
    def test_rest_zero_and_positive_nearby(self):
        params = make_params()
        rest = make_rest(RNG.normal(size=3))
        p_i = np.zeros(3)
        p_j = rest.d0 * params.rest_length
        total = (stretch_potential(p_i, p_j, rest, params)[0]
                 + shear_potential(IDENTITY, IDENTITY, rest, params)[0]
                 + bendtwist_potential(IDENTITY, IDENTITY, rest, params)[0])
        assert total == 0.0
        for _ in range(20):
            dq_i = quat_normalize(IDENTITY + 0.1 * RNG.normal(size=4))
            dq_j = quat_normalize(IDENTITY + 0.1 * RNG.normal(size=4))
            perturbed = (
                stretch_potential(p_i + 0.01 * RNG.normal(size=3), p_j, rest, params)[0]
                + shear_potential(dq_i, dq_j, rest, params)[0]
                + bendtwist_potential(dq_i, dq_j, rest, params)[0])
            assert perturbed > 0.0

    def test_global_sign_flip(self):
        params = make_params()
        rest = make_rest(RNG.normal(size=3))
        for _ in range(20):
            q_i, q_j = random_nearby_quats()
            for pot in (shear_potential, bendtwist_potential):
                a = pot(q_i, q_j, rest, params)[0]
                b = pot(-q_i, -q_j, rest, params)[0]
                assert a == pytest.approx(b, rel=1e-12, abs=1e-15)

    def test_rigid_motion_invariance(self):
        # one global translation + rotation applied to both endpoint
        # positions leaves all three energies unchanged; stretch and
        # bend/twist additionally tolerate co-rotated orientations (the
        # shear measure is deliberately a pure orientation quantity)
        params = make_params()
        rest = make_rest(RNG.normal(size=3))
        for _ in range(20):
            p_i = RNG.normal(size=3)
            p_j = p_i + rest.d0 * params.rest_length * (1 + 0.1 * RNG.normal())
            q_i, q_j = random_nearby_quats()
            g = quat_normalize(RNG.normal(size=4))
            shift = RNG.normal(size=3)
            p_i_m = rotate_vec(g, p_i) + shift
            p_j_m = rotate_vec(g, p_j) + shift
            e_stretch = stretch_potential(p_i, p_j, rest, params)[0]
            e_stretch_m = stretch_potential(p_i_m, p_j_m, rest, params)[0]
            assert e_stretch_m == pytest.approx(e_stretch, rel=1e-9, abs=1e-12)
            e_shear = shear_potential(q_i, q_j, rest, params)[0]
            assert e_shear == shear_potential(q_i, q_j, rest, params)[0]
            e_bt = bendtwist_potential(q_i, q_j, rest, params)[0]
            e_bt_m = bendtwist_potential(quat_mul(g, q_i), quat_mul(g, q_j),
                                         rest, params)[0]
            assert e_bt_m == pytest.approx(e_bt, rel=1e-9, abs=1e-12)


class TestStress:
    def test_rest_zero(self):
        params = make_params()
        rest = make_rest(EX)
        sigma, tau = bond_stress(np.zeros(3), EX * params.rest_length,
                                 IDENTITY, IDENTITY, rest, params)
        assert sigma == 0.0 and tau == 0.0

    def test_pure_stretch_gives_youngs_strain(self):
        params = make_params()
        rest = make_rest(EX)
        for eps in (0.01, 0.003):
            sigma, tau = bond_stress(
                np.zeros(3), EX * params.rest_length * (1 + eps),
                IDENTITY, IDENTITY, rest, params)
            assert sigma == pytest.approx(params.youngs * eps, rel=1e-6)
            assert tau == 0.0

    def test_pure_twist_gives_polar_term_only(self):
        params = make_params()
        rest = make_rest(EX)
        phi = 0.4
        q_i = from_axis_angle(EX, phi)
        sigma, tau = bond_stress(np.zeros(3), EX * params.rest_length,
                                 q_i, IDENTITY, rest, params)
        m_t = params.twist_bend_stiffness()[0] * math.sin(phi / 2)
        assert sigma == pytest.approx(0.0, abs=1e-9)
        assert tau == pytest.approx(m_t * params.radius / params.polar_moment,
                                    rel=1e-10)

    def test_broken_bond_rejected(self):
        params = make_params()
        rest = make_rest(EX)
        state = BondState(status=BROKEN)
        with pytest.raises(BrokenBondError):
            bond_stress(np.zeros(3), EX * 0.1, IDENTITY, IDENTITY, rest, params,
                        state)


class TestFracture:
    def test_threshold_logic(self):
        params = make_params(tensile_strength=100.0, shear_strength=50.0)
        assert not fracture_check(0.0, 0.0, params)
        assert fracture_check(101.0, 0.0, params)
        assert fracture_check(0.0, 50.5, params)
        # strict inequality at the exact thresholds
        assert not fracture_check(100.0, 50.0, params)


class TestVonMises:
    def test_values(self):
        assert von_mises(0.0, 0.0) == 0.0
        assert von_mises(7.5, 0.0) == 7.5
        assert von_mises(3.0, 4.0) == pytest.approx(math.sqrt(57.0))


class TestPlasticity:
    def test_elastic_regime_untouched(self):
        params = make_params()
        plast = PlasticParams(fracture_strain=0.02, yield_strain=0.01)
        state = BondState()
        sigma_y = params.youngs * plast.yield_strain
        out = plastic_update(state, 0.5 * sigma_y, 0.005, plast, params)
        assert out.stiffness_scale == 1.0
        assert out.damage == 1.0
        assert out.status == 0

    def test_no_damage_at_yield_onset(self):
        params = make_params()
        plast = PlasticParams(fracture_strain=0.02, yield_strain=0.01,
                              damage_exponent=0.7)
        state = BondState()
        sigma_y = params.youngs * plast.yield_strain
        out = plastic_update(state, 1.5 * sigma_y, 0.01, plast, params)
        assert out.plastic_strain == 0.0
        assert out.damage == 1.0
        assert out.status == WEAKENED

    def test_full_weakening_ratio(self):
        params = make_params()
        plast = PlasticParams(fracture_strain=0.02, yield_strain=0.01,
                              weakening=1.0)
        state = BondState()
        sigma_y = params.youngs * plast.yield_strain
        out = plastic_update(state, 2.0 * sigma_y, 0.012, plast, params)
        assert out.stiffness_scale == pytest.approx(0.5)
        assert out.damage == pytest.approx(math.exp(-0.002))

    def test_strain_fracture(self):
        params = make_params()
        plast = PlasticParams(fracture_strain=0.02, yield_strain=0.01)
        state = BondState()
        out = plastic_update(state, 0.0, 0.021, plast, params)
        assert out.status == BROKEN

    def test_monotone_damage_and_stiffness(self):
        params = make_params()
        plast = PlasticParams(fracture_strain=0.1, yield_strain=0.01,
                              weakening=0.6)
        state = BondState()
        sigma_y = params.youngs * plast.yield_strain
        prev_d, prev_k = 1.0, 1.0
        for step in range(30):
            strain = 0.012 + 0.002 * math.sin(step) + 0.0005 * step
            vm = sigma_y * (1.0 + abs(math.sin(0.7 * step)))
            plastic_update(state, vm, strain, plast, params)
            assert state.damage <= prev_d + 1e-15
            assert state.stiffness_scale <= prev_k + 1e-15
            prev_d, prev_k = state.damage, state.stiffness_scale

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            PlasticParams(fracture_strain=0.01, yield_strain=0.02)
        with pytest.raises(ValueError):
            PlasticParams(fracture_strain=0.02, yield_strain=0.01, weakening=1.5)
