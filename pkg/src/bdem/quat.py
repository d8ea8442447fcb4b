"""Quaternion algebra with scalar-last storage.

A quaternion is a length-4 array ``(x, y, z, w)``: imaginary part first,
scalar part last.  Every function accepts batched input of shape
``(..., 4)`` and broadcasts like a ufunc.  ``q`` and ``-q`` encode the same
rotation, so rotation comparisons must never be done component-wise.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])

#: below this step norm a geodesic update returns the base point unchanged
GEODESIC_EPS = 1e-8


class ZeroQuaternionError(ValueError):
    """Normalization of a (near-)zero quaternion was requested."""


class NonTangentRateError(ValueError):
    """A quaternion rate has a radial component beyond tolerance."""


def cross_matrix(t: np.ndarray) -> np.ndarray:
    """Skew matrix of ``t`` so that ``cross_matrix(t) @ v == cross(t, v)``."""
    t = np.asarray(t, dtype=float)
    m = np.zeros(t.shape[:-1] + (3, 3))
    x, y, z = t[..., 0], t[..., 1], t[..., 2]
    m[..., 0, 1] = -z
    m[..., 0, 2] = y
    m[..., 1, 0] = z
    m[..., 1, 2] = -x
    m[..., 2, 0] = -y
    m[..., 2, 1] = x
    return m


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b`` (composition of rotations, b first)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    at, asc = a[..., :3], a[..., 3:]
    bt, bsc = b[..., :3], b[..., 3:]
    vec = asc * bt + bsc * at + np.cross(at, bt)
    scal = asc * bsc - np.sum(at * bt, axis=-1, keepdims=True)
    return np.concatenate([vec, scal], axis=-1)


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate([-q[..., :3], q[..., 3:]], axis=-1)


def left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix of left multiplication: ``quat_mul(q, p) == left_matrix(q) @ p``."""
    q = np.asarray(q, dtype=float)
    t, s = q[..., :3], q[..., 3]
    m = np.zeros(q.shape[:-1] + (4, 4))
    m[..., :3, :3] = s[..., None, None] * np.eye(3) + cross_matrix(t)
    m[..., :3, 3] = t
    m[..., 3, :3] = -t
    m[..., 3, 3] = s
    return m


def right_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix of right multiplication: ``quat_mul(p, q) == right_matrix(q) @ p``."""
    q = np.asarray(q, dtype=float)
    t, s = q[..., :3], q[..., 3]
    m = np.zeros(q.shape[:-1] + (4, 4))
    m[..., :3, :3] = s[..., None, None] * np.eye(3) - cross_matrix(t)
    m[..., :3, 3] = t
    m[..., 3, :3] = -t
    m[..., 3, 3] = s
    return m


def nullspace_left(q: np.ndarray) -> np.ndarray:
    """3x4 operator annihilating ``q``; rows of the left variant.

    Stacking its transpose with ``q`` as the fourth column recovers
    ``left_matrix(q)``.  For unit ``q`` the rows are orthonormal and span the
    tangent space of the unit sphere at ``q``.
    """
    q = np.asarray(q, dtype=float)
    t, s = q[..., :3], q[..., 3]
    g = np.zeros(q.shape[:-1] + (3, 4))
    g[..., :3, :3] = s[..., None, None] * np.eye(3) - cross_matrix(t)
    g[..., :, 3] = -t
    return g


def nullspace_right(q: np.ndarray) -> np.ndarray:
    """Right-multiplication counterpart of :func:`nullspace_left`."""
    q = np.asarray(q, dtype=float)
    t, s = q[..., :3], q[..., 3]
    g = np.zeros(q.shape[:-1] + (3, 4))
    g[..., :3, :3] = s[..., None, None] * np.eye(3) + cross_matrix(t)
    g[..., :, 3] = -t
    return g


def rotate_vec(q: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Rotate direction ``d`` by unit quaternion ``q`` (sandwich product)."""
    q = np.asarray(q, dtype=float)
    d = np.asarray(d, dtype=float)
    t, s = q[..., :3], q[..., 3:]
    td = np.sum(t * d, axis=-1, keepdims=True)
    tt = np.sum(t * t, axis=-1, keepdims=True)
    return (s * s - tt) * d + 2.0 * td * t + 2.0 * s * np.cross(t, d)


def angular_velocity(q: np.ndarray, qdot: np.ndarray, strict: bool = False) -> np.ndarray:
    """World angular velocity of a rotation trajectory, ``2 * qdot * conj(q)``.

    ``qdot`` should be tangent (``q . qdot = 0``).  A small radial component
    is projected away, which is what finite-difference rates need; with
    ``strict=True`` such input raises :class:`NonTangentRateError` instead.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    radial = np.sum(q * qdot, axis=-1, keepdims=True)
    if strict:
        norm = np.linalg.norm(qdot, axis=-1, keepdims=True)
        if np.any(np.abs(radial) > 1e-6 * np.maximum(norm, 1e-300)):
            raise NonTangentRateError(
                "quaternion rate has a radial component; project it or relax strict mode"
            )
    tangent = qdot - radial * q
    w4 = 2.0 * quat_mul(tangent, quat_conj(q))
    return w4[..., :3]


def quat_rate(q: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Tangent quaternion rate for world angular velocity ``w``: ``0.5 * (w,0) * q``."""
    w = np.asarray(w, dtype=float)
    w4 = np.concatenate([w, np.zeros(w.shape[:-1] + (1,))], axis=-1)
    return 0.5 * quat_mul(w4, q)


def geodesic_step(q: np.ndarray, dq: np.ndarray) -> np.ndarray:
    """Move from ``q`` along tangent ``dq`` on a great circle of the 3-sphere.

    The base point is returned unchanged for step norms below
    ``GEODESIC_EPS`` (the update divides by the step norm).
    """
    q = np.asarray(q, dtype=float)
    dq = np.asarray(dq, dtype=float)
    n = np.linalg.norm(dq, axis=-1, keepdims=True)
    small = n < GEODESIC_EPS
    n_safe = np.where(small, 1.0, n)
    stepped = q * np.cos(n) + dq / n_safe * np.sin(n)
    return np.where(small, q, stepped)


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < 1e-300):
        raise ZeroQuaternionError("cannot normalize a zero quaternion")
    return q / n


def unit_constraint(q: np.ndarray) -> np.ndarray:
    """Unit-length constraint value ``0.5 * (q . q - 1)``; zero on the sphere."""
    q = np.asarray(q, dtype=float)
    return 0.5 * (np.sum(q * q, axis=-1) - 1.0)


def tangent_project(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Project ambient vector ``v`` onto the tangent space at unit ``q``."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - np.sum(q * v, axis=-1, keepdims=True) * q


def from_axis_angle(axis: np.ndarray, angle: float) -> np.ndarray:
    """Unit quaternion for a rotation of ``angle`` radians about ``axis``."""
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)
    half = 0.5 * angle
    vec = axis * np.sin(half)[..., None] if angle.ndim else axis * np.sin(half)
    scal = np.cos(half)[..., None] if angle.ndim else np.array([np.cos(half)])
    return np.concatenate([vec, np.broadcast_to(scal, vec.shape[:-1] + (1,))], axis=-1)


def from_rotation_vector(rv: np.ndarray) -> np.ndarray:
    """Unit quaternion for the rotation vector ``rv`` (axis * angle)."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    small = angle < 1e-12
    axis = np.where(small, 0.0, rv / np.where(small, 1.0, angle))
    vec = axis * np.sin(0.5 * angle)
    scal = np.cos(0.5 * angle)
    return np.concatenate([vec, scal], axis=-1)


def shortest_arc(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal rotation taking unit vector ``a`` onto unit vector ``b``.

    The antipodal case falls back to a half-turn about a fixed axis
    perpendicular to ``a`` so the result is deterministic.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = float(np.dot(a, b))
    if d < -1.0 + 1e-12:
        helper = np.array([0.0, 0.0, 1.0])
        if abs(a[2]) > 0.9:
            helper = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, helper)
        axis /= np.linalg.norm(axis)
        return np.concatenate([axis, [0.0]])
    q = np.concatenate([np.cross(a, b), [1.0 + d]])
    return quat_normalize(q)
