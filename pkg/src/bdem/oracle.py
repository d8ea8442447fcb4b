"""Explicit reference integrator.

Symplectic-Euler stepping with forces and torques taken from the same
potential gradients the implicit path uses.  Orientation advances by the
exponential map of the angular velocity and is renormalized.  Stability is
spring-limited, so the step size is guarded; the point of this integrator
is to provide an independent trajectory to compare the implicit solver
against.
"""

from __future__ import annotations

import numpy as np

from .bonds import update_bond_states
from .contact import apply_friction
from .geometry import label_components, update_surface_on_break
from .integrator import PotentialModel
from .quat import quat_mul, quat_normalize, quat_rate, from_rotation_vector, right_matrix
from .solver import contact_candidates


def stability_limit(scene) -> float:
    """Largest explicit step the harness accepts: a tenth of the fastest
    bond period scale, using the pair's reduced mass."""
    bonds = scene.bonds
    active = bonds.active
    if not np.any(active):
        return np.inf
    m_i = scene.elements.mass[bonds.i[active]]
    m_j = scene.elements.mass[bonds.j[active]]
    mu = m_i * m_j / (m_i + m_j)
    kn = bonds.stiffness_scale[active] * bonds.kn[active]
    return 0.1 * float(np.min(np.sqrt(mu / kn)))


def torques_from_quaternion_gradient(q: np.ndarray, gq: np.ndarray) -> np.ndarray:
    """World torque equivalent of an ambient quaternion gradient.

    From ``qdot = 0.5 * (w, 0) * q`` the power balance gives
    ``torque = -0.5 * vec(Qr(q)^T grad)``.
    """
    qr = right_matrix(q)
    pulled = np.einsum("bji,bj->bi", qr, gq)
    return -0.5 * pulled[..., :3]


def explicit_step(scene, dt: float, check_stability: bool = True):
    """Advance the scene by one explicit step of size ``dt``."""
    if check_stability:
        limit = stability_limit(scene)
        if dt > limit:
            raise ValueError(
                f"explicit step {dt} exceeds the stability guard {limit:.3e}"
            )
    el = scene.elements
    pairs = contact_candidates(scene)
    model = PotentialModel(el, scene.bonds, pairs, scene.colliders,
                           scene.gravity, scene.k_contact, scene.k_element)
    gp, gq = model.gradient(el.p, el.q)
    free = ~el.pinned

    force = -gp[free]
    torque = torques_from_quaternion_gradient(el.q[free], gq[free])
    w = 2.0 * quat_mul(el.qdot[free], np.concatenate(
        [-el.q[free, :3], el.q[free, 3:]], axis=1))[:, :3]

    el.v[free] += dt * force / el.mass[free, None]
    w += dt * torque / el.inertia[free, None]
    el.p[free] += dt * el.v[free]
    rot = from_rotation_vector(w * dt)
    el.q[free] = quat_normalize(quat_mul(rot, el.q[free]))
    el.qdot[free] = quat_rate(el.q[free], w)

    t_next = scene.time + dt
    if scene.driver is not None:
        scene.driver(el, t_next)

    if scene.mu_s > 0.0 or scene.mu_r > 0.0:
        apply_friction(el, pairs, scene.colliders, scene.k_contact,
                       scene.k_element, scene.mu_s, scene.mu_r, dt)

    events = update_bond_states(scene.bonds, el.p, el.q, scene.youngs, scene.plastic)
    if events:
        update_surface_on_break(scene.surface_flags, scene.bonds,
                                [e[0] for e in events])
        scene.labels = label_components(el.n, scene.bonds)
    scene.time = t_next
    return events


def run_explicit(scene, duration: float, dt: float):
    """Step the scene explicitly for ``duration`` seconds; returns the number
    of steps taken."""
    limit = stability_limit(scene)
    if dt > limit:
        raise ValueError(f"explicit step {dt} exceeds the stability guard {limit:.3e}")
    steps = int(round(duration / dt))
    for _ in range(steps):
        explicit_step(scene, dt, check_stability=False)
    return steps
