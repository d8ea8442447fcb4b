"""Tetrahedral packing, bond-graph construction, and surface reconstruction.

Objects are tetrahedralized up front; each tet becomes one spherical element
(volume-equivalent radius) and each interior face becomes one bond, so no
element carries more than four bonds.  Reconstruction emits the original
boundary faces plus both sides of every broken bond's face, with each tet's
vertices rigidly transported by its element's pose.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bonds as bonds_mod
from .bonds import BondSet
from .elements import ElementSet
from .quat import IDENTITY, rotate_vec, shortest_arc, nullspace_left, nullspace_right

# local faces oriented outward for a positively oriented tet (a, b, c, d)
FACE_VERTS = ((0, 2, 1), (0, 1, 3), (1, 2, 3), (0, 3, 2))

DEGENERATE_REL_VOLUME = 1e-12


class MeshError(ValueError):
    """Malformed or inconsistent tetrahedral mesh input."""


@dataclass
class TetMesh:
    """Validated tetrahedral mesh with face adjacency."""

    vertices: np.ndarray
    tets: np.ndarray
    volumes: np.ndarray = field(default=None)
    centroids: np.ndarray = field(default=None)
    # interior faces: (tet_a, local_a, tet_b, local_b), tet_a < tet_b
    interior: np.ndarray = field(default=None)
    # boundary faces: (tet, local)
    boundary: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.volumes is None:
            self._build()

    def _build(self):
        v = self.vertices
        t = self.tets
        a, b, c, d = v[t[:, 0]], v[t[:, 1]], v[t[:, 2]], v[t[:, 3]]
        signed = np.einsum("ij,ij->i", b - a, np.cross(c - a, d - a)) / 6.0
        inverted = np.nonzero(signed <= 0.0)[0]
        if inverted.size:
            raise MeshError(f"inverted or flat tets at indices {inverted.tolist()}")
        mean_vol = float(np.mean(signed))
        degenerate = np.nonzero(signed < DEGENERATE_REL_VOLUME * mean_vol)[0]
        if degenerate.size:
            raise MeshError(f"degenerate tets at indices {degenerate.tolist()}")
        self.volumes = signed
        self.centroids = (a + b + c + d) / 4.0

        face_map: dict = {}
        for tet_idx in range(t.shape[0]):
            for local, fv in enumerate(FACE_VERTS):
                tri = (t[tet_idx, fv[0]], t[tet_idx, fv[1]], t[tet_idx, fv[2]])
                key = tuple(sorted(tri))
                face_map.setdefault(key, []).append((tet_idx, local))
        interior, boundary = [], []
        for key in sorted(face_map):
            owners = face_map[key]
            if len(owners) > 2:
                raise MeshError(f"non-manifold face {key} shared by {len(owners)} tets")
            if len(owners) == 2:
                (ta, la), (tb, lb) = sorted(owners)
                interior.append((ta, la, tb, lb))
            else:
                boundary.append(owners[0])
        interior.sort()
        boundary.sort()
        self.interior = np.array(interior, dtype=np.int64).reshape(-1, 4)
        self.boundary = np.array(boundary, dtype=np.int64).reshape(-1, 2)

    @property
    def n_tets(self) -> int:
        return self.tets.shape[0]

    def face_vertices(self, tet: int, local: int) -> np.ndarray:
        """Vertex indices of a local face, outward oriented for that tet."""
        fv = FACE_VERTS[local]
        return self.tets[tet, list(fv)]

    def total_volume(self) -> float:
        return float(np.sum(self.volumes))


def parse_tet_mesh(text: str) -> TetMesh:
    """Parse the line-oriented text format.

    Header ``tetmesh <n_vertices> <n_tets>``, then ``v x y z`` lines, then
    ``t i0 i1 i2 i3`` lines with 0-based vertex indices.
    """
    lines = text.splitlines()
    idx = 0

    def fail(lineno, msg):
        raise MeshError(f"line {lineno + 1}: {msg}")

    def next_content():
        nonlocal idx
        while idx < len(lines):
            stripped = lines[idx].strip()
            if stripped and not stripped.startswith("#"):
                return idx, stripped
            idx += 1
        raise MeshError("unexpected end of mesh input")

    lineno, header = next_content()
    idx += 1
    parts = header.split()
    if len(parts) != 3 or parts[0] != "tetmesh":
        fail(lineno, "expected header 'tetmesh <n_vertices> <n_tets>'")
    try:
        nv, nt = int(parts[1]), int(parts[2])
    except ValueError:
        fail(lineno, "vertex/tet counts must be integers")
    if nv < 4 or nt < 1:
        fail(lineno, "mesh needs at least 4 vertices and 1 tet")

    vertices = np.zeros((nv, 3))
    for k in range(nv):
        lineno, line = next_content()
        idx += 1
        parts = line.split()
        if len(parts) != 4 or parts[0] != "v":
            fail(lineno, "expected 'v x y z'")
        try:
            vertices[k] = [float(x) for x in parts[1:]]
        except ValueError:
            fail(lineno, "vertex coordinates must be numbers")

    tets = np.zeros((nt, 4), dtype=np.int64)
    for k in range(nt):
        lineno, line = next_content()
        idx += 1
        parts = line.split()
        if len(parts) != 5 or parts[0] != "t":
            fail(lineno, "expected 't i0 i1 i2 i3'")
        try:
            ids = [int(x) for x in parts[1:]]
        except ValueError:
            fail(lineno, "tet indices must be integers")
        if len(set(ids)) != 4 or min(ids) < 0 or max(ids) >= nv:
            fail(lineno, f"invalid tet vertex indices {ids}")
        tets[k] = ids
    return TetMesh(vertices, tets)


def load_tet_mesh(path) -> TetMesh:
    return parse_tet_mesh(Path(path).read_text())


def write_tet_mesh(path, vertices: np.ndarray, tets: np.ndarray):
    lines = [f"tetmesh {len(vertices)} {len(tets)}"]
    lines += [f"v {x!r} {y!r} {z!r}" for x, y, z in vertices]
    lines += [f"t {a} {b} {c} {d}" for a, b, c, d in tets]
    Path(path).write_text("\n".join(lines) + "\n")


def _face_area(verts: np.ndarray) -> float:
    return 0.5 * float(np.linalg.norm(np.cross(verts[1] - verts[0], verts[2] - verts[0])))


def build_elements_and_bonds(mesh: TetMesh, density: float, youngs: float,
                             shear_modulus: float, tensile_strength: float = math.inf,
                             shear_strength: float = math.inf):
    """One element per tet, one bond per interior face.

    Element mass is density times tet volume with the volume-equivalent
    sphere radius; bond cross sections come from the shared face area so the
    stress formulas keep their meaning per bond.
    """
    n = mesh.n_tets
    mass = density * mesh.volumes
    radius = (3.0 * mesh.volumes / (4.0 * math.pi)) ** (1.0 / 3.0)
    elements = ElementSet(
        p=mesh.centroids.copy(),
        q=np.tile(IDENTITY, (n, 1)),
        v=np.zeros((n, 3)),
        qdot=np.zeros((n, 4)),
        mass=mass,
        radius=radius,
    )

    nb = mesh.interior.shape[0]
    i_arr = mesh.interior[:, 0]
    j_arr = mesh.interior[:, 2]
    delta = mesh.centroids[j_arr] - mesh.centroids[i_arr]
    l0 = np.linalg.norm(delta, axis=1)
    if np.any(l0 < 1e-14):
        raise MeshError("coincident tet centroids across a shared face")
    d0 = delta / l0[:, None]

    areas = np.zeros(nb)
    for k in range(nb):
        fv = mesh.face_vertices(int(i_arr[k]), int(mesh.interior[k, 1]))
        areas[k] = _face_area(mesh.vertices[fv])
    r0 = np.sqrt(areas / math.pi)
    section = areas
    second = math.pi * r0**4 / 4.0
    polar = math.pi * r0**4 / 2.0

    q0 = np.zeros((nb, 4))
    ex = np.array([1.0, 0.0, 0.0])
    for k in range(nb):
        q0[k] = shortest_arc(ex, d0[k])
    frame = nullspace_left(q0) @ np.swapaxes(nullspace_right(q0), -1, -2)

    k_diag = np.stack([
        shear_modulus * polar,
        youngs * second,
        youngs * second,
    ], axis=1) / l0[:, None]

    bonds = BondSet(
        i=i_arr.copy(),
        j=j_arr.copy(),
        rest_length=l0,
        radius=r0,
        d0=d0,
        q0=q0,
        frame=frame,
        kn=youngs * section / l0,
        kt=shear_modulus * section / l0,
        k_diag=k_diag,
        section=section,
        second_moment=second,
        polar_moment=polar,
        tensile_strength=np.full(nb, tensile_strength),
        shear_strength=np.full(nb, shear_strength),
        face_i=mesh.interior[:, 1].copy(),
        face_j=mesh.interior[:, 3].copy(),
    )
    return elements, bonds


def mark_surface_elements(mesh: TetMesh) -> np.ndarray:
    """Initial surface flags: every tet owning a boundary face."""
    flags = np.zeros(mesh.n_tets, dtype=bool)
    if mesh.boundary.size:
        flags[mesh.boundary[:, 0]] = True
    return flags


def update_surface_on_break(flags: np.ndarray, bonds: BondSet, broken_indices):
    """Flag both incident elements of newly broken bonds as surface."""
    for b in broken_indices:
        flags[bonds.i[b]] = True
        flags[bonds.j[b]] = True


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        root = a
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[a] != root:
            self.parent[a], a = root, self.parent[a]
        return root

    def union(self, a: int, b: int):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller id as the root so labels are deterministic
            if ra > rb:
                ra, rb = rb, ra
            self.parent[rb] = ra


@dataclass
class FragmentLabeling:
    labels: np.ndarray
    components: list  # per-component sorted element lists

    @property
    def n_components(self) -> int:
        return len(self.components)


def label_components(n_elements: int, bonds: BondSet) -> FragmentLabeling:
    """Connected components over intact bonds; component ids are assigned in
    order of each component's smallest element index."""
    uf = UnionFind(n_elements)
    for k in np.nonzero(bonds.active)[0]:
        uf.union(int(bonds.i[k]), int(bonds.j[k]))
    roots = [uf.find(e) for e in range(n_elements)]
    order: dict = {}
    for e in range(n_elements):
        if roots[e] not in order:
            order[roots[e]] = len(order)
    labels = np.array([order[r] for r in roots], dtype=np.int64)
    components = [[] for _ in range(len(order))]
    for e in range(n_elements):
        components[labels[e]].append(e)
    return FragmentLabeling(labels, components)


def reconstruct_surface(mesh: TetMesh, bonds: BondSet, labeling: FragmentLabeling,
                        p: np.ndarray, q: np.ndarray):
    """Triangle soup per fragment with rigidly transported tet vertices.

    Each boundary face appears once, each broken bond's face twice (once per
    incident element, outward for that element).
    """
    faces_per_elem = [[] for _ in range(mesh.n_tets)]
    for tet, local in mesh.boundary:
        faces_per_elem[tet].append(int(local))
    for k in np.nonzero(bonds.status == bonds_mod.BROKEN)[0]:
        faces_per_elem[bonds.i[k]].append(int(bonds.face_i[k]))
        faces_per_elem[bonds.j[k]].append(int(bonds.face_j[k]))

    groups = []
    for comp_id, members in enumerate(labeling.components):
        verts, tris = [], []
        for e in members:
            locals_ = sorted(faces_per_elem[e])
            if not locals_:
                continue
            rest_c = mesh.centroids[e]
            for local in locals_:
                fv = mesh.face_vertices(e, local)
                rest = mesh.vertices[fv] - rest_c
                moved = p[e] + rotate_vec(np.broadcast_to(q[e], (3, 4)), rest)
                base = len(verts)
                verts.extend(moved)
                tris.append((base, base + 1, base + 2))
        groups.append((comp_id, np.array(verts).reshape(-1, 3),
                       np.array(tris, dtype=np.int64).reshape(-1, 3)))
    return groups


def write_surface_obj(path, groups):
    """Write reconstruction groups as text: g/v/f lines, 1-based indices."""
    lines = []
    offset = 0
    for comp_id, verts, tris in groups:
        lines.append(f"g component_{comp_id}")
        for x, y, z in verts:
            lines.append(f"v {x!r} {y!r} {z!r}")
        for a, b, c in tris:
            lines.append(f"f {a + 1 + offset} {b + 1 + offset} {c + 1 + offset}")
        offset += len(verts)
    Path(path).write_text("\n".join(lines) + "\n")
