"""Self-checks: derivative verification, manifold identities, and solver
cross-checks on randomized states.

The finite-difference harness perturbs whole batches of configurations at
once, so a hundred random configurations per potential verify in well under
a second.  ``corrupt_gradient=True`` injects an error into one analytic
gradient; the report must then flag a failure (negative control).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import bonds as bonds_mod
from . import contact as contact_mod
from .elements import ElementMass, rotational_mass_matrix
from .integrator import ImplicitProblem, PotentialModel, StepContext
from .linalg import pcg
from .quat import (
    geodesic_step,
    left_matrix,
    nullspace_left,
    nullspace_right,
    quat_mul,
    quat_normalize,
    right_matrix,
    rotate_vec,
    shortest_arc,
    tangent_project,
)
from .scenes import built_in_scene
from .solver import (
    SolverConfig,
    minimize_second_order,
    reduced_gradient,
    riemannian_hessian_dense,
)

GRAD_TOL = 1e-4
HESS_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    passed: bool
    worst: float
    tolerance: float

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return f"[{flag}] {self.name}: worst {self.worst:.3e} (tol {self.tolerance:.1e})"


def fd_gradient_batch(fn, x, h):
    """Central-difference gradient of a batched scalar map ``fn(x)``.

    ``x`` has shape (m, d); each coordinate is perturbed for the whole
    batch at once.
    """
    m, d = x.shape
    g = np.zeros((m, d))
    for k in range(d):
        e = np.zeros(d)
        e[k] = h
        g[:, k] = (fn(x + e) - fn(x - e)) / (2.0 * h)
    return g


def fd_hessian_batch(fn, x, h):
    """Second central differences of a batched scalar map; (m, d, d)."""
    m, d = x.shape
    hess = np.zeros((m, d, d))
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        for j in range(i, d):
            ej = np.zeros(d)
            ej[j] = h
            val = (fn(x + ei + ej) - fn(x + ei - ej)
                   - fn(x - ei + ej) + fn(x - ei - ej)) / (4.0 * h * h)
            hess[:, i, j] = val
            hess[:, j, i] = val
    return hess


def _rel_err(a, b):
    """Worst per-configuration relative error between batched tensors."""
    diff = np.abs(a - b).reshape(a.shape[0], -1).max(axis=1)
    scale = np.abs(b).reshape(b.shape[0], -1).max(axis=1)
    return float(np.max(diff / np.maximum(scale, 1e-12)))


# ---------------------------------------------------------------------------
# randomized configurations per potential
# ---------------------------------------------------------------------------

def _stretch_case(rng, m):
    l0 = 0.1 + 0.2 * rng.random(m)
    kn = 10.0 ** (2.0 + 3.0 * rng.random(m))
    p_i = rng.normal(size=(m, 3))
    direction = rng.normal(size=(m, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    p_j = p_i + direction * (l0 * (1.0 + 0.2 * rng.normal(size=m)))[:, None]

    def fn(x):
        e, *_ = bonds_mod.stretch_terms(x[:, :3], x[:, 3:], l0, kn, want_grad=False)
        return e

    def grads(x):
        _, gi, gj, h = bonds_mod.stretch_terms(x[:, :3], x[:, 3:], l0, kn,
                                               want_hess=True)
        return np.concatenate([gi, gj], axis=1), h

    return fn, grads, np.concatenate([p_i, p_j], axis=1), float(np.mean(l0))


def _shear_case(rng, m):
    d0 = rng.normal(size=(m, 3))
    d0 /= np.linalg.norm(d0, axis=1, keepdims=True)
    kt = 10.0 ** (1.0 + 3.0 * rng.random(m))
    q_i = quat_normalize(rng.normal(size=(m, 4)))
    q_j = quat_normalize(q_i + 0.4 * rng.normal(size=(m, 4)))

    def fn(x):
        e, *_ = bonds_mod.shear_terms(x[:, :4], x[:, 4:], d0, kt, want_grad=False)
        return e

    def grads(x):
        _, gi, gj, h = bonds_mod.shear_terms(x[:, :4], x[:, 4:], d0, kt,
                                             want_hess=True)
        return np.concatenate([gi, gj], axis=1), h

    return fn, grads, np.concatenate([q_i, q_j], axis=1), 1.0


def _bendtwist_case(rng, m):
    d0 = rng.normal(size=(m, 3))
    d0 /= np.linalg.norm(d0, axis=1, keepdims=True)
    q0 = np.stack([shortest_arc(np.array([1.0, 0.0, 0.0]), d) for d in d0])
    frame = bonds_mod.rest_frame(q0)
    k_diag = 10.0 ** (1.0 + 2.0 * rng.random((m, 3)))
    q_i = quat_normalize(rng.normal(size=(m, 4)))
    q_j = quat_normalize(q_i + 0.4 * rng.normal(size=(m, 4)))

    def fn(x):
        e, *_ = bonds_mod.bendtwist_terms(x[:, :4], x[:, 4:], frame, k_diag,
                                          want_grad=False)
        return e

    def grads(x):
        _, gi, gj, h = bonds_mod.bendtwist_terms(x[:, :4], x[:, 4:], frame,
                                                 k_diag, want_hess=True)
        return np.concatenate([gi, gj], axis=1), h

    return fn, grads, np.concatenate([q_i, q_j], axis=1), 1.0


def _self_repulsion_case(rng, m):
    r_i = 0.2 + 0.2 * rng.random(m)
    r_j = 0.2 + 0.2 * rng.random(m)
    k = 1e4
    p_i = rng.normal(size=(m, 3))
    direction = rng.normal(size=(m, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    # overlap well away from the contact onset so differences stay one-sided
    gap = (0.3 + 0.4 * rng.random(m)) * (r_i + r_j)
    p_j = p_i + direction * gap[:, None]

    def fn(x):
        e, *_ = contact_mod.self_repulsion_terms(x[:, :3], x[:, 3:], r_i, r_j, k,
                                                 want_grad=False)
        return e

    def grads(x):
        _, gi, gj, h = contact_mod.self_repulsion_terms(
            x[:, :3], x[:, 3:], r_i, r_j, k, want_hess=True
        )
        return np.concatenate([gi, gj], axis=1), h

    return fn, grads, np.concatenate([p_i, p_j], axis=1), float(np.mean(r_i))


def _external_case(rng, m, collider_kind):
    k = 1e3
    if collider_kind == "halfspace":
        collider = contact_mod.HalfSpace((0.2, -0.3, 1.0), 0.1)
        pts = rng.normal(size=(m, 3))
        g = collider.sdf(pts)
        pts -= (g + 0.05 + 0.3 * rng.random(m))[:, None] * collider.gradient(pts)
    elif collider_kind == "sphere":
        collider = contact_mod.SphereCollider((0.1, 0.0, -0.2), 1.0)
        direction = rng.normal(size=(m, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        pts = np.array(collider.center) + direction * (0.4 + 0.4 * rng.random(m))[:, None]
    else:
        collider = contact_mod.BoxCollider((0.0, 0.0, 0.0), (1.0, 0.8, 0.6))
        # sample inside, away from the interior ridges where the sdf kinks
        while True:
            pts = (rng.random((m, 3)) * 1.6 - 0.8) * np.array([1.0, 0.8, 0.6])
            d = np.abs(pts) - np.array(collider.half_extents)
            srt = np.sort(d, axis=1)
            ok = (srt[:, 2] - srt[:, 1] > 0.05) & (collider.sdf(pts) < -0.02)
            if np.all(ok):
                break
            pts = pts[ok]
            m = pts.shape[0]
            if m >= 40:
                break

    def fn(x):
        e, *_ = contact_mod.external_repulsion_terms(x, collider, k, want_grad=False)
        return e

    def grads(x):
        _, g, h = contact_mod.external_repulsion_terms(x, collider, k, want_hess=True)
        return g, h

    return fn, grads, pts, 0.1


def derivative_checks(rng=None, n_configs: int = 120, corrupt_gradient: bool = False):
    """Gradient and Hessian finite-difference verification per potential."""
    rng = np.random.default_rng(0) if rng is None else rng
    cases = {
        "stretch": _stretch_case(rng, n_configs),
        "shear": _shear_case(rng, n_configs),
        "bend-twist": _bendtwist_case(rng, n_configs),
        "self-repulsion": _self_repulsion_case(rng, n_configs),
        "external-halfspace": _external_case(rng, n_configs, "halfspace"),
        "external-sphere": _external_case(rng, n_configs, "sphere"),
        "external-box": _external_case(rng, n_configs, "box"),
    }
    results = []
    for name, (fn, grads, x, scale) in cases.items():
        g_an, h_an = grads(x)
        if corrupt_gradient and name == "stretch":
            g_an = g_an * (1.0 + 1e-2)
        g_fd = fd_gradient_batch(fn, x, 1e-6 * scale)
        err_g = _rel_err(g_an, g_fd)
        h_fd = fd_hessian_batch(fn, x, 1e-4 * scale)
        err_h = _rel_err(h_an, h_fd)
        results.append(CheckResult(f"gradient/{name}", err_g < GRAD_TOL, err_g, GRAD_TOL))
        results.append(CheckResult(f"hessian/{name}", err_h < HESS_TOL, err_h, HESS_TOL))
    return results


# ---------------------------------------------------------------------------
# manifold and solver checks
# ---------------------------------------------------------------------------

def quaternion_checks(rng=None, n: int = 200):
    rng = np.random.default_rng(1) if rng is None else rng
    q = quat_normalize(rng.normal(size=(n, 4)))
    p = quat_normalize(rng.normal(size=(n, 4)))
    r = quat_normalize(rng.normal(size=(n, 4)))
    worst = 0.0
    worst = max(worst, float(np.abs(
        quat_mul(quat_mul(q, p), r) - quat_mul(q, quat_mul(p, r))).max()))
    worst = max(worst, float(np.abs(
        np.einsum("bij,bj->bi", left_matrix(q), p)
        - np.einsum("bij,bj->bi", right_matrix(p), q)).max()))
    g = nullspace_left(q)
    worst = max(worst, float(np.abs(np.einsum("bij,bj->bi", g, q)).max()))
    gr = nullspace_right(q)
    worst = max(worst, float(np.abs(np.einsum("bij,bj->bi", gr, q)).max()))
    proj = np.eye(4) - q[:, :, None] * q[:, None, :]
    worst = max(worst, float(np.abs(np.swapaxes(g, 1, 2) @ g - proj).max()))
    d = rng.normal(size=(n, 3))
    lhs = rotate_vec(quat_mul(q, p), d)
    rhs = rotate_vec(q, rotate_vec(p, d))
    worst = max(worst, float(np.abs(lhs - rhs).max()))
    return [CheckResult("quaternion-identities", worst < 1e-10, worst, 1e-10)]


def mass_matrix_check(rng=None, n: int = 100):
    rng = np.random.default_rng(2) if rng is None else rng
    worst = 0.0
    for _ in range(n):
        mass = ElementMass(0.5 + rng.random(), 0.2 + rng.random())
        q = quat_normalize(rng.normal(size=4))
        m4 = rotational_mass_matrix(q, mass)
        worst = max(worst, float(np.abs(m4 - mass.rotational * np.eye(4)).max()
                                 / mass.rotational))
    return [CheckResult("rotational-mass-identity", worst < 1e-10, worst, 1e-10)]


def _small_problem(rng):
    scene = built_in_scene("comparison")
    el = scene.elements
    el.v += 0.05 * rng.normal(size=el.v.shape)
    scene.bootstrap_history()
    ctx = StepContext(scene.dt, scene.p_prev.copy(), scene.q_prev.copy(),
                      el.p.copy(), el.q.copy())
    model = PotentialModel(el, scene.bonds, np.zeros((0, 2), dtype=np.int64),
                           scene.colliders, scene.gravity, scene.k_contact,
                           scene.k_element)
    problem = ImplicitProblem(model, ctx)
    p = el.p + 0.002 * rng.normal(size=el.p.shape)
    q = quat_normalize(el.q + 0.02 * rng.normal(size=el.q.shape))
    p[el.pinned] = el.p[el.pinned]
    q[el.pinned] = el.q[el.pinned]
    return problem, p, q


def manifold_gradient_check(rng=None, n_dirs: int = 24):
    """Projected gradient equals the directional derivative along geodesics."""
    rng = np.random.default_rng(3) if rng is None else rng
    problem, p, q = _small_problem(rng)
    free = problem.free
    gp, gq = problem.gradient(p, q)
    gq_t = tangent_project(q, gq)
    worst = 0.0
    h = 1e-6
    for _ in range(n_dirs):
        # per-element unit directions keep every geodesic step well above
        # the small-step shortcut of the retraction
        dp = rng.normal(size=p.shape)
        dp /= np.linalg.norm(dp, axis=1, keepdims=True)
        dq = tangent_project(q, rng.normal(size=q.shape))
        dq /= np.linalg.norm(dq, axis=1, keepdims=True)
        dp[~free] = 0.0
        dq[~free] = 0.0
        f_plus = problem.value(p + h * dp, quat_normalize(geodesic_step(q, h * dq)))
        f_minus = problem.value(p - h * dp, quat_normalize(geodesic_step(q, -h * dq)))
        fd = (f_plus - f_minus) / (2.0 * h)
        an = float(np.sum(gp * dp) + np.sum(gq_t * dq))
        worst = max(worst, abs(fd - an) / max(abs(fd), 1e-9))
    return [CheckResult("manifold-gradient-direction", worst < 1e-6, worst, 1e-6)]


def manifold_hessian_check(rng=None, n_dirs: int = 16):
    """Manifold Hessian quadratic form equals geodesic second differences."""
    rng = np.random.default_rng(4) if rng is None else rng
    problem, p, q = _small_problem(rng)
    free = problem.free
    hess = riemannian_hessian_dense(problem, p, q)
    n = problem.n
    worst = 0.0
    h = 1e-4
    for _ in range(n_dirs):
        dp = rng.normal(size=p.shape)
        dp /= np.linalg.norm(dp, axis=1, keepdims=True)
        dq = tangent_project(q, rng.normal(size=q.shape))
        dq /= np.linalg.norm(dq, axis=1, keepdims=True)
        dp[~free] = 0.0
        dq[~free] = 0.0
        vec = np.zeros(7 * n)
        for e in range(n):
            vec[7 * e:7 * e + 3] = dp[e]
            vec[7 * e + 3:7 * e + 7] = dq[e]
        quad = float(vec @ (hess @ vec))
        f0 = problem.value(p, q)
        f_plus = problem.value(p + h * dp, quat_normalize(geodesic_step(q, h * dq)))
        f_minus = problem.value(p - h * dp, quat_normalize(geodesic_step(q, -h * dq)))
        fd = (f_plus - 2.0 * f0 + f_minus) / (h * h)
        worst = max(worst, abs(fd - quad) / max(abs(fd), 1e-9))
    return [CheckResult("manifold-hessian-quadratic", worst < 1e-3, worst, 1e-3)]


def reduction_equivalence_check(rng=None):
    """Reduced and projector-form Newton directions agree."""
    rng = np.random.default_rng(5) if rng is None else rng
    problem, p, q = _small_problem(rng)
    cfg = SolverConfig(epsilon=1e-5, max_iterations=12,
                       linear_mode="dense-reduced", compare_projector=True)
    result = minimize_second_order(problem, p, q, cfg)
    gaps = [r.direction_gap for r in result.records if r.alpha > 0]
    worst = max(gaps) if gaps else 1.0
    return [CheckResult("reduced-vs-projector", worst < 1e-8, worst, 1e-8)]


def pcg_check(rng=None):
    rng = np.random.default_rng(6) if rng is None else rng
    worst = 0.0
    for _ in range(10):
        a = rng.normal(size=(50, 50))
        mat = a @ a.T + 50.0 * np.eye(50)
        b = rng.normal(size=50)
        res = pcg(lambda v: mat @ v, b, tol_rel=1e-10)
        exact = np.linalg.solve(mat, b)
        worst = max(worst, float(np.linalg.norm(res.x - exact)
                                 / np.linalg.norm(exact)))
    return [CheckResult("pcg-vs-dense", worst < 1e-8, worst, 1e-8)]


def run_validation(seed: int = 0, n_configs: int = 120,
                   corrupt_gradient: bool = False):
    """Full validation battery; returns CheckResult rows."""
    rng = np.random.default_rng(seed)
    results = []
    results += quaternion_checks(rng)
    results += mass_matrix_check(rng)
    results += derivative_checks(rng, n_configs, corrupt_gradient)
    results += manifold_gradient_check(rng)
    results += manifold_hessian_check(rng)
    results += reduction_equivalence_check(rng)
    results += pcg_check(rng)
    return results


def report_lines(results):
    lines = [r.line() for r in results]
    n_fail = sum(1 for r in results if not r.passed)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return lines
