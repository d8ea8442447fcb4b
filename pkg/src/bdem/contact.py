"""Collision potentials and the explicit post-step friction correction.

Element-element repulsion acts on the sphere overlap depth; element-world
repulsion penalizes the signed distance of penetrating centers.  Both enter
the incremental potential.  Friction is applied once per step, after the
velocity update, and can reduce velocities to zero but never reverse them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .quat import angular_velocity, quat_rate

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# colliders
# ---------------------------------------------------------------------------

class Collider:
    """Signed-distance collider; negative values mean penetration."""

    def sdf(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def gradient(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def hessian(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError


@dataclass(frozen=True)
class HalfSpace(Collider):
    """Points with ``normal . p < offset`` are inside."""

    normal: tuple
    offset: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=float)
        object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))

    def sdf(self, p):
        return np.asarray(p, dtype=float) @ np.asarray(self.normal) - self.offset

    def gradient(self, p):
        p = np.asarray(p, dtype=float)
        return np.broadcast_to(np.asarray(self.normal), p.shape).copy()

    def hessian(self, p):
        p = np.asarray(p, dtype=float)
        return np.zeros(p.shape[:-1] + (3, 3))


@dataclass(frozen=True)
class SphereCollider(Collider):
    center: tuple
    radius: float

    def _delta(self, p):
        d = np.asarray(p, dtype=float) - np.asarray(self.center, dtype=float)
        r = np.linalg.norm(d, axis=-1)
        r_safe = np.maximum(r, 1e-12)
        return d, r, r_safe

    def sdf(self, p):
        _, r, _ = self._delta(p)
        return r - self.radius

    def gradient(self, p):
        d, _, r_safe = self._delta(p)
        return d / r_safe[..., None]

    def hessian(self, p):
        d, _, r_safe = self._delta(p)
        n = d / r_safe[..., None]
        nn = n[..., :, None] * n[..., None, :]
        return (np.eye(3) - nn) / r_safe[..., None, None]


@dataclass(frozen=True)
class BoxCollider(Collider):
    """Axis-aligned box; inside the box counts as penetration."""

    center: tuple
    half_extents: tuple

    def _local(self, p):
        return np.asarray(p, dtype=float) - np.asarray(self.center, dtype=float)

    def sdf(self, p):
        d = np.abs(self._local(p)) - np.asarray(self.half_extents, dtype=float)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return outside + inside

    def gradient(self, p):
        local = self._local(p)
        d = np.abs(local) - np.asarray(self.half_extents, dtype=float)
        sign = np.where(local >= 0.0, 1.0, -1.0)
        pos = np.maximum(d, 0.0)
        out_norm = np.linalg.norm(pos, axis=-1)
        is_out = out_norm > 0.0
        g_out = sign * pos / np.maximum(out_norm, 1e-300)[..., None]
        # inside: move along the axis closest to a face
        axis = np.argmax(d, axis=-1)
        g_in = np.zeros_like(local)
        np.put_along_axis(g_in, axis[..., None], 1.0, axis=-1)
        g_in = g_in * sign
        return np.where(is_out[..., None], g_out, g_in)

    def hessian(self, p):
        local = self._local(p)
        d = np.abs(local) - np.asarray(self.half_extents, dtype=float)
        pos = np.maximum(d, 0.0)
        out_norm = np.linalg.norm(pos, axis=-1)
        h = np.zeros(local.shape[:-1] + (3, 3))
        is_out = out_norm > 0.0
        if np.any(is_out):
            sign = np.where(local >= 0.0, 1.0, -1.0)
            n = sign * pos / np.maximum(out_norm, 1e-300)[..., None]
            nn = n[..., :, None] * n[..., None, :]
            active = (pos > 0.0).astype(float)
            diag = active[..., :, None] * np.eye(3)
            h_out = (diag - nn) / np.maximum(out_norm, 1e-300)[..., None, None]
            h = np.where(is_out[..., None, None], h_out, h)
        return h


# ---------------------------------------------------------------------------
# pair detection
# ---------------------------------------------------------------------------

def broad_phase(positions: np.ndarray, radii: np.ndarray, cell_size: float):
    """Overlapping sphere pairs via spatial hashing.

    ``cell_size`` must be at least twice the largest radius so a single
    neighborhood scan finds every overlap.  Pairs are returned sorted,
    each once, as an ``(m, 2)`` int array with ``i < j``.
    """
    positions = np.asarray(positions, dtype=float)
    radii = np.asarray(radii, dtype=float)
    if radii.size and cell_size < 2.0 * float(np.max(radii)):
        raise ValueError("cell_size must be at least twice the largest radius")
    cells = np.floor(positions / cell_size).astype(np.int64)
    table: dict = {}
    for k, key in enumerate(map(tuple, cells)):
        table.setdefault(key, []).append(k)

    offsets = [(a, b, c) for a in (-1, 0, 1) for b in (-1, 0, 1) for c in (-1, 0, 1)]
    pairs = set()
    for key, members in table.items():
        for off in offsets:
            other = (key[0] + off[0], key[1] + off[1], key[2] + off[2])
            neighbors = table.get(other)
            if neighbors is None:
                continue
            for a in members:
                for b in neighbors:
                    if a < b:
                        pairs.add((a, b))
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64)
    cand = np.array(sorted(pairs), dtype=np.int64)
    d = np.linalg.norm(positions[cand[:, 1]] - positions[cand[:, 0]], axis=1)
    keep = d < radii[cand[:, 0]] + radii[cand[:, 1]]
    return cand[keep]


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

def self_repulsion_terms(p_i, p_j, r_i, r_j, stiffness, want_hess=False,
                         want_grad=True):
    """Overlap spring between sphere pairs; zero once separated.

    Returns ``(energy, g_i, g_j, hess)``; coincident centers fall back to a
    +x normal (logged) so the result stays deterministic.
    """
    p_i = np.asarray(p_i, dtype=float)
    p_j = np.asarray(p_j, dtype=float)
    r_i = np.asarray(r_i, dtype=float)
    r_j = np.asarray(r_j, dtype=float)
    stiffness = np.asarray(stiffness, dtype=float)

    d = p_j - p_i
    length = np.linalg.norm(d, axis=-1)
    depth = np.maximum(0.0, r_i + r_j - length)
    energy = 0.5 * stiffness * depth**2
    if not (want_grad or want_hess):
        return energy, None, None, None

    coincident = length < 1e-12
    if np.any(coincident):
        logger.warning("coincident contact centers; using +x fallback normal")
    n = np.where(
        coincident[..., None],
        np.array([1.0, 0.0, 0.0]),
        d / np.maximum(length, 1e-300)[..., None],
    )
    touching = depth > 0.0
    g_i = np.where(touching[..., None], (stiffness * depth)[..., None] * n, 0.0)
    g_j = -g_i

    hess = None
    if want_hess:
        eye = np.eye(3)
        nn = n[..., :, None] * n[..., None, :]
        safe_l = np.maximum(length, 1e-300)
        a = stiffness[..., None, None] * (nn - (depth / safe_l)[..., None, None] * (eye - nn))
        a = np.where(touching[..., None, None], a, 0.0)
        hess = np.zeros(np.shape(energy) + (6, 6))
        hess[..., :3, :3] = a
        hess[..., 3:, 3:] = a
        hess[..., :3, 3:] = -a
        hess[..., 3:, :3] = -a
    return energy, g_i, g_j, hess


def external_repulsion_terms(p, collider: Collider, stiffness, want_hess=False,
                             want_grad=True):
    """Quadratic penalty on the signed distance of penetrating centers.

    Returns ``(energy, grad, hess)`` per point; separated points contribute
    exactly zero.
    """
    p = np.asarray(p, dtype=float)
    g = collider.sdf(p)
    inside = g < 0.0
    energy = np.where(inside, 0.5 * stiffness * g**2, 0.0)
    if not (want_grad or want_hess):
        return energy, None, None

    grad_g = collider.gradient(p)
    grad = np.where(inside[..., None], stiffness * g[..., None] * grad_g, 0.0)
    hess = None
    if want_hess:
        gg = grad_g[..., :, None] * grad_g[..., None, :]
        full = stiffness * (gg + g[..., None, None] * collider.hessian(p))
        hess = np.where(inside[..., None, None], full, 0.0)
    return energy, grad, hess


def self_repulsion_potential(p_i, p_j, r_i, r_j, stiffness):
    """Single-pair wrapper returning (energy, 6-gradient, 6x6 Hessian)."""
    e, g_i, g_j, h = self_repulsion_terms(p_i, p_j, r_i, r_j, stiffness, want_hess=True)
    return float(e), np.concatenate([g_i, g_j]), h


def external_repulsion_potential(p, collider: Collider, stiffness):
    """Single-point wrapper returning (energy, 3-gradient, 3x3 Hessian)."""
    e, g, h = external_repulsion_terms(p, collider, stiffness, want_hess=True)
    return float(e), g, h


# ---------------------------------------------------------------------------
# friction
# ---------------------------------------------------------------------------

def _friction_delta(vec_rel, own, normal_force, coeff, scale, dt):
    """Clamped friction correction along the element's own velocity.

    Returns the (possibly zero) additive correction to ``own``; magnitude
    never exceeds ``|own|`` and never accelerates the element.
    """
    own_norm = np.linalg.norm(own)
    rel_norm = np.linalg.norm(vec_rel)
    if own_norm == 0.0 or rel_norm == 0.0 or normal_force == 0.0:
        return np.zeros(3)
    factor = min(1.0, coeff * normal_force * dt / (scale * rel_norm))
    delta = -factor * vec_rel
    direction = own / own_norm
    along = float(np.dot(delta, direction))
    along = min(0.0, max(along, -own_norm))
    return along * direction


def friction_post_step(v_i, w_i, v_rel, w_rel, normal, normal_force,
                       mass, inertia, radius, mu_s, mu_r, dt):
    """Velocity and angular-velocity friction corrections for one contact.

    ``v_rel``/``w_rel`` are relative to the contact partner; the tangential
    part of ``v_rel`` drives sliding friction, the full ``w_rel`` drives
    rolling friction.  Returns ``(dv, dw)``.
    """
    v_rel = np.asarray(v_rel, dtype=float)
    v_n = float(np.dot(v_rel, normal)) * np.asarray(normal, dtype=float)
    v_t = v_rel - v_n
    dv = _friction_delta(v_t, np.asarray(v_i, dtype=float), normal_force,
                         mu_s, mass, dt)
    dw = _friction_delta(np.asarray(w_rel, dtype=float), np.asarray(w_i, dtype=float),
                         normal_force, mu_r, inertia / radius**3, dt)
    return dv, dw


def apply_friction(elements, pairs: np.ndarray, colliders, k_c: float, k_ec: float,
                   mu_s: float, mu_r: float, dt: float):
    """Apply friction for every active contact, in fixed element order.

    Self-contact pairs first (ascending pair order, correcting both sides),
    then collider contacts (ascending element, collider order).  Mutates the
    element velocities and quaternion rates in place.
    """
    if mu_s == 0.0 and mu_r == 0.0:
        return
    p, v = elements.p, elements.v
    w = angular_velocity(elements.q, elements.qdot)
    touched = np.zeros(elements.n, dtype=bool)

    def correct(k, v_rel, w_rel, normal, fn):
        if elements.pinned[k]:
            return
        dv, dw = friction_post_step(
            v[k], w[k], v_rel, w_rel, normal, fn,
            elements.mass[k], elements.inertia[k], elements.radius[k],
            mu_s, mu_r, dt,
        )
        v[k] += dv
        w[k] += dw
        touched[k] = True

    for a, b in pairs:
        d = p[a] - p[b]
        dist = np.linalg.norm(d)
        if dist >= elements.radius[a] + elements.radius[b]:
            continue
        normal = d / dist if dist > 1e-12 else np.array([1.0, 0.0, 0.0])
        fn = k_ec * dist
        correct(a, v[a] - v[b], w[a] - w[b], normal, fn)
        correct(b, v[b] - v[a], w[b] - w[a], -normal, fn)

    for collider in colliders:
        g = collider.sdf(p)
        inside = np.nonzero(g < 0.0)[0]
        grads = collider.gradient(p[inside]) if inside.size else None
        for row, k in enumerate(inside):
            normal = grads[row]
            fn = k_c * abs(g[k]) * np.linalg.norm(normal)
            correct(int(k), v[k], w[k], normal, fn)

    upd = np.nonzero(touched)[0]
    if upd.size:
        elements.qdot[upd] = quat_rate(elements.q[upd], w[upd])
