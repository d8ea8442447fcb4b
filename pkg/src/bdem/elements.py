"""Rigid-element state and spherical equivalent mass data.

Elements carry a position, a unit-quaternion orientation, and their time
derivatives.  All elements are simulated as spheres; the rotational mass in
quaternion coordinates is a scalar multiple of the 4x4 identity, which keeps
the inertia block of every linear system diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .quat import IDENTITY, quat_conj, right_matrix


@dataclass(frozen=True)
class ElementMass:
    """Mass data of one spherical element."""

    mass: float
    radius: float

    def __post_init__(self):
        if self.mass <= 0.0:
            raise ValueError(f"mass must be positive, got {self.mass}")
        if self.radius <= 0.0:
            raise ValueError(f"radius must be positive, got {self.radius}")

    @property
    def inertia(self) -> float:
        """Moment of inertia of the solid sphere, (2/5) m r^2."""
        return 0.4 * self.mass * self.radius**2

    @property
    def rotational(self) -> float:
        """Quaternion-coordinate mass scale, (8/5) m r^2."""
        return 1.6 * self.mass * self.radius**2


def sphere_mass(mass: float, radius: float) -> ElementMass:
    return ElementMass(mass, radius)


def rotational_mass_matrix(q: np.ndarray, mass: ElementMass) -> np.ndarray:
    """Equivalent rotational mass ``4 Qr(conj q)^T J4 Qr(conj q)``.

    Built from the literal matrix product; for a sphere it collapses to
    ``(8/5) m r^2 I4`` for every unit ``q``.
    """
    j4 = mass.inertia * np.eye(4)
    qr = right_matrix(quat_conj(q))
    return 4.0 * qr.T @ j4 @ qr


@dataclass
class ElementState:
    """State of one element: position, orientation and their rates."""

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    qdot: np.ndarray

    @classmethod
    def at_rest(cls, p, q=None) -> "ElementState":
        q = IDENTITY.copy() if q is None else np.asarray(q, dtype=float)
        return cls(np.asarray(p, dtype=float), q, np.zeros(3), np.zeros(4))


def kinetic_energy(state: ElementState, mass: ElementMass) -> float:
    """Translational plus quaternion-form rotational kinetic energy (J)."""
    t_lin = 0.5 * mass.mass * float(np.dot(state.v, state.v))
    t_rot = 0.5 * mass.rotational * float(np.dot(state.qdot, state.qdot))
    return t_lin + t_rot


@dataclass
class ElementSet:
    """Struct-of-arrays state for all elements of a scene.

    ``pinned`` rows are excluded from the solver unknowns; their states are
    prescribed per frame by the scene driver.
    """

    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    qdot: np.ndarray
    mass: np.ndarray
    radius: np.ndarray
    pinned: np.ndarray = field(default=None)

    def __post_init__(self):
        n = self.p.shape[0]
        if self.pinned is None:
            self.pinned = np.zeros(n, dtype=bool)

    @property
    def n(self) -> int:
        return self.p.shape[0]

    @property
    def rot_mass(self) -> np.ndarray:
        """Per-element quaternion mass scale (8/5) m r^2."""
        return 1.6 * self.mass * self.radius**2

    @property
    def inertia(self) -> np.ndarray:
        """Per-element sphere moment of inertia (2/5) m r^2."""
        return 0.4 * self.mass * self.radius**2

    def kinetic_energy(self) -> float:
        t_lin = 0.5 * np.sum(self.mass * np.sum(self.v**2, axis=1))
        t_rot = 0.5 * np.sum(self.rot_mass * np.sum(self.qdot**2, axis=1))
        return float(t_lin + t_rot)

    def copy(self) -> "ElementSet":
        return ElementSet(
            self.p.copy(), self.q.copy(), self.v.copy(), self.qdot.copy(),
            self.mass.copy(), self.radius.copy(), self.pinned.copy(),
        )
