"""Bond potentials, stress evaluation, fracture and plasticity.

A bond connects two elements and resists four deformation modes:

* stretch -- a rest-length spring on the center distance,
* shear -- the angle by which the common rotation of the pair tilts the
  bond's rest direction,
* bend and twist -- the relative-rotation vector mapped into the bond's
  local frame and weighted by a diagonal stiffness.

All energies come with analytic gradients and Hessians in the ambient
coordinates (positions in R^3, quaternions in R^4); the manifold machinery
projects them.  Batched kernels operate on arrays with a leading bond axis;
thin per-bond wrappers expose the same math for a single bond.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .quat import nullspace_left, nullspace_right

INTACT = 0
WEAKENED = 1
BROKEN = 2

_DEGENERATE_REL = 1e-12
_ANTIPODAL_TOL = 1e-8
_SMALL_ANGLE = 1e-4


class DegenerateBondError(ValueError):
    """Bond endpoints are (numerically) coincident."""


class DegenerateShearError(ValueError):
    """Endpoint quaternions are antipodal; the common rotation is undefined."""


class BrokenBondError(ValueError):
    """Stress was requested for a broken bond."""


@dataclass(frozen=True)
class BondParams:
    """Material and cross-section data of one bond.

    ``radius`` is the bond cross-section radius; section area and second
    moments follow from it.  Stiffnesses use the rest length as the gauge
    length.
    """

    youngs: float
    shear_modulus: float
    rest_length: float
    radius: float
    tensile_strength: float = math.inf
    shear_strength: float = math.inf

    def __post_init__(self):
        for name in ("youngs", "shear_modulus", "rest_length", "radius"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")

    @property
    def section(self) -> float:
        return math.pi * self.radius**2

    @property
    def second_moment(self) -> float:
        return math.pi * self.radius**4 / 4.0

    @property
    def polar_moment(self) -> float:
        return math.pi * self.radius**4 / 2.0

    @property
    def stretch_stiffness(self) -> float:
        return self.youngs * self.section / self.rest_length

    @property
    def shear_stiffness(self) -> float:
        return self.shear_modulus * self.section / self.rest_length

    def twist_bend_stiffness(self) -> np.ndarray:
        """Diagonal of the local bend/twist stiffness (twist first)."""
        return np.array([
            self.shear_modulus * self.polar_moment,
            self.youngs * self.second_moment,
            self.youngs * self.second_moment,
        ]) / self.rest_length


@dataclass(frozen=True)
class BondRest:
    """Rest geometry: unit direction i->j, rest frame, and its world->local map."""

    d0: np.ndarray
    q0: np.ndarray
    frame: np.ndarray  # 3x3, rows (bond axis, two normals)


def rest_frame(q0: np.ndarray) -> np.ndarray:
    """World->local rotation of the bond rest frame.

    Built as the product of the two nullspace operators, which equals the
    transpose of the rotation matrix of ``q0``.
    """
    gl = nullspace_left(q0)
    gr = nullspace_right(q0)
    return gl @ np.swapaxes(gr, -1, -2)


@dataclass
class BondState:
    """Mutable per-bond status: fracture flag, weakening and damage."""

    status: int = INTACT
    stiffness_scale: float = 1.0
    damage: float = 1.0
    plastic_strain: float = 0.0
    sigma: float = 0.0
    tau: float = 0.0


@dataclass(frozen=True)
class PlasticParams:
    """Yield/damage parameters of the plastic bond extension."""

    fracture_strain: float
    yield_strain: float
    weakening: float = 1.0
    damage_exponent: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.yield_strain < self.fracture_strain:
            raise ValueError("need 0 < yield_strain < fracture_strain")
        if not 0.0 <= self.weakening <= 1.0:
            raise ValueError("weakening must lie in [0, 1]")
        if self.damage_exponent <= 0.0:
            raise ValueError("damage_exponent must be positive")


# ---------------------------------------------------------------------------
# batched kernels
# ---------------------------------------------------------------------------

def stretch_terms(p_i, p_j, rest_length, stiffness, want_hess=False, want_grad=True):
    """Rest-length spring on the center distance.

    Returns ``(energy, g_i, g_j, hess)`` with ``hess`` of shape (..., 6, 6)
    ordered (p_i, p_j); gradients and Hessian are ``None`` when not
    requested.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    rest_length = np.asarray(rest_length, dtype=float)
    stiffness = np.asarray(stiffness, dtype=float)

    d = p_j - p_i
    length = np.linalg.norm(d, axis=-1)
    bad = length < _DEGENERATE_REL * rest_length
    if np.any(bad):
        idx = np.nonzero(np.atleast_1d(bad))[0]
        raise DegenerateBondError(f"coincident bond endpoints at indices {idx.tolist()}")
    c = length - rest_length
    energy = 0.5 * stiffness * c**2
    if not (want_grad or want_hess):
        return energy, None, None, None

    n = d / length[..., None]
    g_j = (stiffness * c)[..., None] * n
    g_i = -g_j

    hess = None
    if want_hess:
        eye = np.eye(3)
        nn = n[..., :, None] * n[..., None, :]
        a = stiffness[..., None, None] * (nn + (c / length)[..., None, None] * (eye - nn))
        hess = np.zeros(np.shape(energy) + (6, 6))
        hess[..., :3, :3] = a
        hess[..., 3:, 3:] = a
        hess[..., :3, 3:] = -a
        hess[..., 3:, :3] = -a
    return energy, g_i, g_j, hess


def _shear_angle_factors(theta, stiffness):
    """dV/dc and d2V/dc2 of V = k/2 * arccos(c)^2, series-safe near zero."""
    sin_t = np.sin(theta)
    small = theta < _SMALL_ANGLE
    sin_safe = np.where(small, 1.0, sin_t)
    a1 = np.where(small, -(1.0 + theta**2 / 6.0), -theta / sin_safe)
    a2 = np.where(
        small,
        (1.0 + 2.0 * theta**2 / 5.0) / 3.0,
        (sin_t - theta * np.cos(theta)) / sin_safe**3,
    )
    return stiffness * a1, stiffness * a2


def shear_terms(q_i, q_j, d0, stiffness, want_hess=False, want_grad=True):
    """Shear energy of the common rotation of the pair.

    The common rotation is the normalized quaternion mean; the energy
    penalizes the angle between the rest direction and that direction
    rotated by the common rotation.  The angle cosine is a Rayleigh
    quotient of the stacked quaternion sum, which makes the ambient
    derivatives closed-form.

    Returns ``(energy, g_qi, g_qj, hess)`` with ``hess`` of shape
    (..., 8, 8) ordered (q_i, q_j).
    """
    q_i = np.asarray(q_i, dtype=float)
    q_j = np.asarray(q_j, dtype=float)
    d0 = np.asarray(d0, dtype=float)
    stiffness = np.asarray(stiffness, dtype=float)

    u = q_i + q_j
    un2 = np.sum(u * u, axis=-1)
    bad = un2 < _ANTIPODAL_TOL**2
    if np.any(bad):
        idx = np.nonzero(np.atleast_1d(bad))[0]
        raise DegenerateShearError(f"antipodal quaternion pairs at indices {idx.tolist()}")

    ut, us = u[..., :3], u[..., 3]
    proj = np.sum(d0 * ut, axis=-1)
    rho = (2.0 * proj**2 - np.sum(ut * ut, axis=-1) + us**2) / un2
    cos_t = np.clip(rho, -1.0 + 1e-12, 1.0)
    theta = np.arccos(cos_t)
    energy = 0.5 * stiffness * theta**2
    if not (want_grad or want_hess):
        return energy, None, None, None

    # S u with S = blockdiag(2 d0 d0^T - I, 1)
    su = np.concatenate([2.0 * proj[..., None] * d0 - ut, u[..., 3:]], axis=-1)
    a1, a2 = _shear_angle_factors(theta, stiffness)

    grad_rho = 2.0 * (su - rho[..., None] * u) / un2[..., None]
    g = a1[..., None] * grad_rho

    hess = None
    if want_hess:
        s_mat = np.zeros(np.shape(un2) + (4, 4))
        s_mat[..., :3, :3] = 2.0 * d0[..., :, None] * d0[..., None, :] - np.eye(3)
        s_mat[..., 3, 3] = 1.0
        outer_gu = grad_rho[..., :, None] * u[..., None, :]
        hess_rho = (2.0 / un2[..., None, None]) * (
            s_mat
            - rho[..., None, None] * np.eye(4)
            - outer_gu
            - np.swapaxes(outer_gu, -1, -2)
        )
        hu = (
            a2[..., None, None] * grad_rho[..., :, None] * grad_rho[..., None, :]
            + a1[..., None, None] * hess_rho
        )
        hess = np.zeros(np.shape(un2) + (8, 8))
        for r0, c0 in ((0, 0), (0, 4), (4, 0), (4, 4)):
            hess[..., r0:r0 + 4, c0:c0 + 4] = hu
    return energy, g, g.copy(), hess


def _pure_right_matrix(w):
    """Right-multiplication matrix of the pure quaternion (w, 0); skew."""
    m = np.zeros(w.shape[:-1] + (4, 4))
    x, y, z = w[..., 0], w[..., 1], w[..., 2]
    m[..., 0, 1] = z
    m[..., 0, 2] = -y
    m[..., 1, 0] = -z
    m[..., 1, 2] = x
    m[..., 2, 0] = y
    m[..., 2, 1] = -x
    m[..., :3, 3] = w
    m[..., 3, :3] = -w
    return m


def bendtwist_terms(q_i, q_j, frame, k_diag, want_hess=False, want_grad=True):
    """Bend/twist energy of the relative rotation in the bond frame.

    The deformation vector is the imaginary part of the relative quaternion
    mapped to the local frame; it is bilinear in the two quaternions, so the
    only Hessian curvature term is the skew coupling block.

    Returns ``(energy, g_qi, g_qj, hess)`` with ``hess`` shaped (..., 8, 8).
    """
    q_i = np.asarray(q_i, dtype=float)
    q_j = np.asarray(q_j, dtype=float)
    frame = np.asarray(frame, dtype=float)
    k_diag = np.asarray(k_diag, dtype=float)

    a_i = frame @ nullspace_left(q_j)          # dt/dq_i, (..., 3, 4)
    t = np.einsum("...ij,...j->...i", a_i, q_i)
    kt = k_diag * t
    energy = 0.5 * np.sum(t * kt, axis=-1)
    if not (want_grad or want_hess):
        return energy, None, None, None

    a_j = -frame @ nullspace_left(q_i)         # dt/dq_j
    g_i = np.einsum("...ij,...i->...j", a_i, kt)
    g_j = np.einsum("...ij,...i->...j", a_j, kt)

    hess = None
    if want_hess:
        ait = np.swapaxes(a_i, -1, -2)
        k_ai = k_diag[..., :, None] * a_i
        k_aj = k_diag[..., :, None] * a_j
        h_ii = ait @ k_ai
        h_jj = np.swapaxes(a_j, -1, -2) @ k_aj
        cross = ait @ k_aj
        w = np.einsum("...ji,...j->...i", frame, kt)   # frame^T (K t)
        skew = _pure_right_matrix(w)
        h_ij = cross + skew
        hess = np.zeros(np.shape(energy) + (8, 8))
        hess[..., :4, :4] = h_ii
        hess[..., 4:, 4:] = h_jj
        hess[..., :4, 4:] = h_ij
        hess[..., 4:, :4] = np.swapaxes(h_ij, -1, -2)
    return energy, g_i, g_j, hess


# ---------------------------------------------------------------------------
# per-bond API
# ---------------------------------------------------------------------------

def stretch_potential(p_i, p_j, rest: BondRest, params: BondParams):
    """Energy, 6-gradient and 6x6 Hessian of the stretch mode."""
    e, g_i, g_j, h = stretch_terms(
        p_i, p_j, params.rest_length, params.stretch_stiffness, want_hess=True
    )
    return float(e), np.concatenate([g_i, g_j]), h


def shear_potential(q_i, q_j, rest: BondRest, params: BondParams):
    """Energy, 8-gradient and 8x8 Hessian of the shear mode."""
    e, g_i, g_j, h = shear_terms(q_i, q_j, rest.d0, params.shear_stiffness, want_hess=True)
    return float(e), np.concatenate([g_i, g_j]), h


def bendtwist_potential(q_i, q_j, rest: BondRest, params: BondParams):
    """Energy, 8-gradient and 8x8 Hessian of the bend/twist mode."""
    e, g_i, g_j, h = bendtwist_terms(
        q_i, q_j, rest.frame, params.twist_bend_stiffness(), want_hess=True
    )
    return float(e), np.concatenate([g_i, g_j]), h


def bond_stress(p_i, p_j, q_i, q_j, rest: BondRest, params: BondParams,
                state: BondState | None = None):
    """Tensile and shear stress carried by the bond (Pa).

    Normal force comes from the stretch gradient; the shear potential has no
    positional dependence, so its force contribution is identically zero and
    the shear stress is carried by the twist moment alone.  Damage shrinks
    the effective section area.
    """
    if state is not None and state.status == BROKEN:
        raise BrokenBondError("stress is undefined for a broken bond")
    scale = state.stiffness_scale if state is not None else 1.0
    damage = state.damage if state is not None else 1.0

    length = float(np.linalg.norm(np.asarray(p_j, dtype=float) - np.asarray(p_i, dtype=float)))
    f_n = scale * params.stretch_stiffness * abs(length - params.rest_length)
    f_s = 0.0  # the shear mode carries no positional gradient

    t = rest.frame @ (nullspace_left(q_j) @ np.asarray(q_i, dtype=float))
    kt = scale * params.twist_bend_stiffness() * t
    m_t = abs(kt[0])
    m_b = math.hypot(kt[1], kt[2])

    section = damage * params.section
    sigma = f_n / section + m_b * params.radius / params.second_moment
    tau = f_s / section + m_t * params.radius / params.polar_moment
    return sigma, tau


def fracture_check(sigma: float, tau: float, params: BondParams) -> bool:
    """True when the bond must break; strict inequality at the thresholds."""
    return sigma > params.tensile_strength or tau > params.shear_strength


def von_mises(sigma_n: float, tau: float) -> float:
    return math.sqrt(sigma_n**2 + 3.0 * tau**2)


def plastic_update(state: BondState, sigma_vm: float, strain: float,
                   plastic: PlasticParams, params: BondParams) -> BondState:
    """Apply yield weakening and damage; break on the fracture strain.

    Weakening and damage are irreversible: the stiffness scale and the
    damage factor only ever decrease.
    """
    if state.status == BROKEN:
        return state
    if strain > plastic.fracture_strain:
        state.status = BROKEN
        return state
    sigma_y = params.youngs * plastic.yield_strain
    if sigma_vm <= sigma_y:
        return state
    k_new = 1.0 - plastic.weakening * (1.0 - sigma_y / sigma_vm)
    state.stiffness_scale = min(state.stiffness_scale, k_new)
    eps_p = max(0.0, strain - plastic.yield_strain)
    state.plastic_strain = max(state.plastic_strain, eps_p)
    state.damage = min(state.damage, math.exp(-eps_p**plastic.damage_exponent))
    state.status = max(state.status, WEAKENED)
    return state


# ---------------------------------------------------------------------------
# whole-scene bond storage
# ---------------------------------------------------------------------------

@dataclass
class BondSet:
    """Struct-of-arrays storage for every bond of a scene.

    Broken bonds stay in the arrays (reconstruction needs them) and are
    skipped through the ``active`` mask.
    """

    i: np.ndarray
    j: np.ndarray
    rest_length: np.ndarray
    radius: np.ndarray
    d0: np.ndarray
    q0: np.ndarray
    frame: np.ndarray            # (nb, 3, 3) world->local maps
    kn: np.ndarray
    kt: np.ndarray
    k_diag: np.ndarray           # (nb, 3) bend/twist stiffness diagonals
    section: np.ndarray
    second_moment: np.ndarray
    polar_moment: np.ndarray
    tensile_strength: np.ndarray
    shear_strength: np.ndarray
    face_i: np.ndarray           # local face index of the shared face in tet i
    face_j: np.ndarray
    status: np.ndarray = field(default=None)
    stiffness_scale: np.ndarray = field(default=None)
    damage: np.ndarray = field(default=None)
    plastic_strain: np.ndarray = field(default=None)
    sigma: np.ndarray = field(default=None)
    tau: np.ndarray = field(default=None)

    def __post_init__(self):
        nb = self.i.shape[0]
        if self.status is None:
            self.status = np.full(nb, INTACT, dtype=np.int8)
        if self.stiffness_scale is None:
            self.stiffness_scale = np.ones(nb)
        if self.damage is None:
            self.damage = np.ones(nb)
        if self.plastic_strain is None:
            self.plastic_strain = np.zeros(nb)
        if self.sigma is None:
            self.sigma = np.zeros(nb)
        if self.tau is None:
            self.tau = np.zeros(nb)

    @property
    def n(self) -> int:
        return self.i.shape[0]

    @property
    def active(self) -> np.ndarray:
        return self.status != BROKEN

    def energy_terms(self, p: np.ndarray, q: np.ndarray, want_hess: bool = False,
                     want_grad: bool = True):
        """Batched energies and derivatives of all active bonds.

        Returns ``(idx, energy, gp_i, gp_j, gq_i, gq_j, h_pp, h_qq)`` where
        ``idx`` indexes into the full bond arrays and the gradient/Hessian
        entries are ``None`` unless requested.  Stiffnesses carry the
        weakening scale.
        """
        idx = np.nonzero(self.active)[0]
        if idx.size == 0:
            z3 = np.zeros((0, 3))
            z4 = np.zeros((0, 4))
            return idx, np.zeros(0), z3, z3, z4, z4, None, None
        ii, jj = self.i[idx], self.j[idx]
        scale = self.stiffness_scale[idx]
        e_s, gpi, gpj, hpp = stretch_terms(
            p[ii], p[jj], self.rest_length[idx], scale * self.kn[idx],
            want_hess, want_grad,
        )
        e_h, gqi_s, gqj_s, hqq_s = shear_terms(
            q[ii], q[jj], self.d0[idx], scale * self.kt[idx], want_hess, want_grad
        )
        e_b, gqi_b, gqj_b, hqq_b = bendtwist_terms(
            q[ii], q[jj], self.frame[idx], scale[:, None] * self.k_diag[idx],
            want_hess, want_grad,
        )
        energy = e_s + e_h + e_b
        if not (want_grad or want_hess):
            return idx, energy, None, None, None, None, None, None
        h_qq = hqq_s + hqq_b if want_hess else None
        return idx, energy, gpi, gpj, gqi_s + gqi_b, gqj_s + gqj_b, hpp, h_qq

    def stresses(self, p: np.ndarray, q: np.ndarray):
        """Batched (sigma, tau) for all active bonds; see :func:`bond_stress`."""
        idx = np.nonzero(self.active)[0]
        if idx.size == 0:
            return idx, np.zeros(0), np.zeros(0)
        ii, jj = self.i[idx], self.j[idx]
        scale = self.stiffness_scale[idx]
        length = np.linalg.norm(p[jj] - p[ii], axis=-1)
        f_n = scale * self.kn[idx] * np.abs(length - self.rest_length[idx])
        t = np.einsum(
            "bij,bj->bi", self.frame[idx],
            np.einsum("bij,bj->bi", nullspace_left(q[jj]), q[ii]),
        )
        kt = scale[:, None] * self.k_diag[idx] * t
        m_t = np.abs(kt[:, 0])
        m_b = np.hypot(kt[:, 1], kt[:, 2])
        section = self.damage[idx] * self.section[idx]
        sigma = f_n / section + m_b * self.radius[idx] / self.second_moment[idx]
        tau = m_t * self.radius[idx] / self.polar_moment[idx]
        return idx, sigma, tau

    def axial_strain(self, p: np.ndarray, idx: np.ndarray) -> np.ndarray:
        length = np.linalg.norm(p[self.j[idx]] - p[self.i[idx]], axis=-1)
        return (length - self.rest_length[idx]) / self.rest_length[idx]


def update_bond_states(bonds: BondSet, p: np.ndarray, q: np.ndarray,
                       youngs: float, plastic: PlasticParams | None = None):
    """Refresh stresses, apply plasticity, and break over-stressed bonds.

    Returns a list of ``(bond_index, sigma, tau)`` for bonds broken by this
    call, in ascending bond order.
    """
    idx, sigma, tau = bonds.stresses(p, q)
    bonds.sigma[idx] = sigma
    bonds.tau[idx] = tau
    if idx.size == 0:
        return []

    broke = np.zeros(idx.size, dtype=bool)
    if plastic is not None:
        strain = bonds.axial_strain(p, idx)
        sigma_y = youngs * plastic.yield_strain
        vm = np.sqrt(sigma**2 + 3.0 * tau**2)
        yielding = vm > sigma_y
        if np.any(yielding):
            k_new = 1.0 - plastic.weakening * (1.0 - sigma_y / vm[yielding])
            sub = idx[yielding]
            bonds.stiffness_scale[sub] = np.minimum(bonds.stiffness_scale[sub], k_new)
            eps_p = np.maximum(0.0, strain[yielding] - plastic.yield_strain)
            bonds.plastic_strain[sub] = np.maximum(bonds.plastic_strain[sub], eps_p)
            bonds.damage[sub] = np.minimum(
                bonds.damage[sub], np.exp(-eps_p**plastic.damage_exponent)
            )
            bonds.status[sub] = np.maximum(bonds.status[sub], WEAKENED)
        broke |= strain > plastic.fracture_strain

    broke |= (sigma > bonds.tensile_strength[idx]) | (tau > bonds.shear_strength[idx])
    events = []
    if np.any(broke):
        sub = idx[broke]
        bonds.status[sub] = BROKEN
        events = [(int(b), float(s), float(t))
                  for b, s, t in zip(sub, sigma[broke], tau[broke])]
    return events
