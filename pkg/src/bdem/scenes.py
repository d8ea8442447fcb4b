"""Scene model and the bundled benchmark scenes.

A scene owns the element and bond arrays, the reference tet mesh, the
colliders, and the step history.  Built-in scenes generate beam and plate
meshes procedurally (uniform cube grid, six tets per cube, which is
conforming across neighboring cubes) and attach boundary conditions via the
pinned flag plus a driver that prescribes pinned states per time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bonds import BondSet, PlasticParams
from .contact import Collider, HalfSpace
from .elements import ElementSet
from .geometry import (
    FragmentLabeling,
    TetMesh,
    build_elements_and_bonds,
    label_components,
    mark_surface_elements,
)
from .quat import IDENTITY, from_axis_angle, geodesic_step, quat_normalize, quat_rate

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass
class Scene:
    name: str
    mesh: TetMesh
    elements: ElementSet
    bonds: BondSet
    colliders: list = field(default_factory=list)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    dt: float = 1.0 / 60.0
    youngs: float = 1e7
    shear_modulus: float = 4e6
    density: float = 2500.0
    k_contact: float = 1e6
    k_element: float = 1e6
    mu_s: float = 0.0
    mu_r: float = 0.0
    plastic: PlasticParams | None = None
    driver: object = None
    time: float = 0.0
    p_prev: np.ndarray = None
    q_prev: np.ndarray = None
    labels: FragmentLabeling = None
    surface_flags: np.ndarray = None

    def __post_init__(self):
        if self.labels is None:
            self.labels = label_components(self.elements.n, self.bonds)
        if self.surface_flags is None:
            self.surface_flags = mark_surface_elements(self.mesh)
        if self.p_prev is None:
            self.bootstrap_history()

    def bootstrap_history(self):
        """Seed the two-point history from the initial velocities."""
        el = self.elements
        self.p_prev = el.p - self.dt * el.v
        self.q_prev = quat_normalize(geodesic_step(el.q, -self.dt * el.qdot))

    def force_scale(self) -> float:
        g = float(np.linalg.norm(self.gravity))
        if g == 0.0:
            return 1.0
        return float(np.sqrt(np.sum((self.elements.mass * g) ** 2)))

    def default_epsilon(self) -> float:
        return 1e-4 * self.force_scale()


# ---------------------------------------------------------------------------
# procedural meshes
# ---------------------------------------------------------------------------

_KUHN_PATHS = [(0, 1, 2), (0, 2, 1), (1, 0, 2), (1, 2, 0), (2, 0, 1), (2, 1, 0)]


def grid_tet_mesh(nx: int, ny: int, nz: int, h: float,
                  origin=(0.0, 0.0, 0.0)) -> TetMesh:
    """Uniform cube grid split into six tets per cube along the main
    diagonal; face diagonals match between neighboring cubes."""
    origin = np.asarray(origin, dtype=float)
    shape = (nx + 1, ny + 1, nz + 1)
    coords = np.stack(np.meshgrid(
        np.arange(shape[0]), np.arange(shape[1]), np.arange(shape[2]),
        indexing="ij"), axis=-1)
    vertices = origin + h * coords.reshape(-1, 3)

    def vid(i, j, k):
        return (i * shape[1] + j) * shape[2] + k

    tets = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                base = np.array([i, j, k])
                for path in _KUHN_PATHS:
                    corners = [base.copy()]
                    cur = base.copy()
                    for axis in path:
                        cur = cur.copy()
                        cur[axis] += 1
                        corners.append(cur)
                    ids = [vid(*c) for c in corners]
                    a, b, c, d = (vertices[x] for x in ids)
                    vol = np.dot(b - a, np.cross(c - a, d - a))
                    if vol < 0.0:
                        ids[2], ids[3] = ids[3], ids[2]
                    tets.append(ids)
    return TetMesh(vertices, np.array(tets, dtype=np.int64))


def free_tets_mesh(count: int, size: float = 0.1, spacing: float = 1.0,
                   origin=(0.0, 0.0, 1.0)) -> TetMesh:
    """Disconnected regular-ish tets (no shared faces, hence no bonds)."""
    base = size * np.array([
        [0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0],
    ])
    verts, tets = [], []
    for k in range(count):
        offset = np.asarray(origin, dtype=float) + np.array([spacing * k, 0.0, 0.0])
        start = len(verts)
        verts.extend(base + offset)
        tets.append([start, start + 1, start + 2, start + 3])
    return TetMesh(np.array(verts), np.array(tets, dtype=np.int64))


# ---------------------------------------------------------------------------
# boundary-condition drivers
# ---------------------------------------------------------------------------

def _layer_ids(mesh: TetMesh, axis: int, lo: float, hi: float) -> np.ndarray:
    c = mesh.centroids[:, axis]
    return np.nonzero((c >= lo) & (c < hi))[0]


def stretch_driver(ids: np.ndarray, p0: np.ndarray, speed: float):
    """Prescribe constant-velocity axial motion of one end layer."""
    velocity = np.array([speed, 0.0, 0.0])

    def drive(elements: ElementSet, t: float):
        elements.p[ids] = p0 + t * velocity
        elements.v[ids] = velocity
        elements.q[ids] = IDENTITY
        elements.qdot[ids] = 0.0
    return drive


def twist_driver(ids: np.ndarray, p0: np.ndarray, axis_point: np.ndarray,
                 rate: float):
    """Prescribe constant-rate rotation of one end layer about the beam axis."""
    ex = np.array([1.0, 0.0, 0.0])
    w = rate * ex

    def drive(elements: ElementSet, t: float):
        rot = from_axis_angle(ex, rate * t)
        arm0 = p0 - axis_point
        arm = np.stack([
            arm0[:, 0],
            np.cos(rate * t) * arm0[:, 1] - np.sin(rate * t) * arm0[:, 2],
            np.sin(rate * t) * arm0[:, 1] + np.cos(rate * t) * arm0[:, 2],
        ], axis=1)
        elements.p[ids] = axis_point + arm
        elements.v[ids] = np.cross(w, arm)
        elements.q[ids] = rot
        elements.qdot[ids] = quat_rate(np.broadcast_to(rot, (ids.size, 4)), w)
    return drive


# ---------------------------------------------------------------------------
# built-in scenes
# ---------------------------------------------------------------------------

def _beam_scene(name: str, resolution: int, youngs: float, density: float,
                poisson: float = 0.25, length: float = 1.0,
                tensile_strength: float = math.inf,
                shear_strength: float = math.inf, dt: float = 0.016) -> Scene:
    nx, ny, nz = 6 * resolution, resolution, resolution
    h = length / nx
    shear_modulus = youngs / (2.0 * (1.0 + poisson))
    mesh = grid_tet_mesh(nx, ny, nz, h)
    elements, bonds = build_elements_and_bonds(
        mesh, density, youngs, shear_modulus, tensile_strength, shear_strength
    )
    scene = Scene(
        name=name, mesh=mesh, elements=elements, bonds=bonds,
        youngs=youngs, shear_modulus=shear_modulus, density=density, dt=dt,
    )
    left = _layer_ids(mesh, 0, -math.inf, h)
    elements.pinned[left] = True
    return scene


def beam_drape(resolution: int = 3, youngs: float = 1e9,
               density: float = 2500.0, dt: float = 0.016) -> Scene:
    """Beam clamped at one end, sagging under gravity."""
    return _beam_scene("beam-drape", resolution, youngs, density, dt=dt)


def beam_stretch(resolution: int = 3, youngs: float = 1e7,
                 density: float = 2500.0, speed: float = 0.02,
                 dt: float = 1.0 / 60.0) -> Scene:
    """Beam with one clamped end and one end pulled at constant velocity."""
    scene = _beam_scene("beam-stretch", resolution, youngs, density, dt=dt)
    scene.gravity = np.zeros(3)
    mesh = scene.mesh
    h = 1.0 / (6 * resolution)
    right = _layer_ids(mesh, 0, 1.0 - h, math.inf)
    scene.elements.pinned[right] = True
    scene.driver = stretch_driver(right, mesh.centroids[right].copy(), speed)
    return scene


def beam_twist(resolution: int = 3, youngs: float = 1e7,
               density: float = 2500.0, rate: float = math.pi / 4.0,
               dt: float = 1.0 / 60.0) -> Scene:
    """Beam with one clamped end and one end twisting at a constant rate."""
    scene = _beam_scene("beam-twist", resolution, youngs, density, dt=dt)
    scene.gravity = np.zeros(3)
    mesh = scene.mesh
    h = 1.0 / (6 * resolution)
    cross = resolution * h
    right = _layer_ids(mesh, 0, 1.0 - h, math.inf)
    scene.elements.pinned[right] = True
    axis_point = np.array([0.0, 0.5 * cross, 0.5 * cross])
    scene.driver = twist_driver(right, mesh.centroids[right].copy(), axis_point, rate)
    return scene


def drop_fracture(resolution: int = 2, youngs: float = 1e9,
                  density: float = 2500.0, speed: float = 4.0,
                  tensile_strength: float = 3e5, shear_strength: float = 3e5,
                  dt: float = 0.002) -> Scene:
    """Plate dropped onto a rigid floor; bonds break on impact."""
    n = 4 * resolution
    h = 0.4 / n
    shear_modulus = youngs / 2.5
    mesh = grid_tet_mesh(n, n, 1, h, origin=(0.0, 0.0, 0.05))
    elements, bonds = build_elements_and_bonds(
        mesh, density, youngs, shear_modulus, tensile_strength, shear_strength
    )
    elements.v[:, 2] = -speed
    return Scene(
        name="drop-fracture", mesh=mesh, elements=elements, bonds=bonds,
        colliders=[HalfSpace((0.0, 0.0, 1.0), 0.0)],
        youngs=youngs, shear_modulus=shear_modulus, density=density, dt=dt,
        k_contact=2e7, k_element=2e7, mu_s=0.2, mu_r=0.05,
    )


def free_fall(count: int = 1, dt: float = 1.0 / 60.0) -> Scene:
    """Unbonded tets in free flight; exercises pure inertia plus gravity."""
    mesh = free_tets_mesh(count)
    elements, bonds = build_elements_and_bonds(mesh, 2500.0, 1e7, 4e6)
    return Scene(
        name="free-fall", mesh=mesh, elements=elements, bonds=bonds,
        youngs=1e7, shear_modulus=4e6, density=2500.0, dt=dt,
        k_element=0.0,
    )


def comparison_beam(youngs: float = 1e8, density: float = 2500.0,
                    amplitude: float = 5.0, spin: float = 150.0,
                    length: float = 17.0, dt: float = 0.002) -> Scene:
    """Around one hundred elements with transverse and spin kicks; the
    single-step benchmark scene for the optimizer comparison.

    The spin makes the step rotate elements by a large angle, which is what
    separates constraint-handling strategies.  Meter-scale elements keep
    the translational and rotational mass scales comparable, so the
    landscape is well-conditioned for plain gradient descent.
    """
    nx = 17
    h = length / nx
    shear_modulus = youngs / 2.5
    mesh = grid_tet_mesh(nx, 1, 1, h)
    elements, bonds = build_elements_and_bonds(mesh, density, youngs, shear_modulus)
    scene = Scene(
        name="comparison", mesh=mesh, elements=elements, bonds=bonds,
        youngs=youngs, shear_modulus=shear_modulus, density=density, dt=dt,
    )
    left = _layer_ids(mesh, 0, -math.inf, h)
    elements.pinned[left] = True
    x = mesh.centroids[:, 0] / length
    elements.v[:, 2] = amplitude * np.sin(math.pi * x)
    w = np.zeros((elements.n, 3))
    w[:, 0] = spin * np.sin(2.0 * math.pi * x)
    elements.qdot[:] = quat_rate(elements.q, w)
    elements.v[left] = 0.0
    elements.qdot[left] = 0.0
    scene.bootstrap_history()
    return scene


BUILTIN_SCENES = {
    "beam-drape": beam_drape,
    "beam-stretch": beam_stretch,
    "beam-twist": beam_twist,
    "drop-fracture": drop_fracture,
    "free-fall": free_fall,
    "comparison": comparison_beam,
}


def built_in_scene(name: str, resolution: int | None = None, **overrides) -> Scene:
    """Instantiate a bundled scene by name."""
    if name not in BUILTIN_SCENES:
        raise KeyError(
            f"unknown scene {name!r}; available: {', '.join(sorted(BUILTIN_SCENES))}"
        )
    builder = BUILTIN_SCENES[name]
    kwargs = dict(overrides)
    if resolution is not None and name not in ("free-fall", "comparison"):
        kwargs["resolution"] = resolution
    return builder(**kwargs)
