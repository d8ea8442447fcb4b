"""Minimization of the incremental potential over positions and unit
quaternions.

The search space is the product of R^3 and the quaternion 3-sphere per
element.  Gradients are projected to tangent spaces, Hessians carry the
sphere curvature correction, and the Newton system is reduced with the
nullspace operator to six unknowns per element (three positions, three
rotations).  Local Hessian blocks are eigenvalue-clamped so every Newton
direction is a descent direction; the reduced system is solved with
preconditioned conjugate gradient at a residual-dependent tolerance.

Penalty, Lagrange-multiplier, and augmented-Lagrangian reference solvers
operate on the same objective in ambient coordinates with dense Newton
steps; they exist for the optimizer comparison benchmark.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .integrator import ImplicitProblem
from .linalg import BlockJacobi, block_coo, pcg, relative_tolerance
from .quat import (
    geodesic_step,
    nullspace_left,
    quat_normalize,
    tangent_project,
    unit_constraint,
)

logger = logging.getLogger(__name__)


@dataclass
class SolverConfig:
    epsilon: float = 1e-6
    max_iterations: int = 100
    armijo: float = 1e-4
    shrink: float = 0.5
    min_alpha: float = 1e-12
    pcg_max_iterations: int = 2000
    linear_mode: str = "pcg"      # pcg | dense-reduced | dense-projector
    compare_projector: bool = False
    workers: int = 1
    penalty_kappa: float = 1e8


@dataclass
class IterationRecord:
    index: int
    f: float
    grad_norm: float
    constraint_norm: float
    alpha: float = 0.0
    pcg_iterations: int = 0
    direction_gap: float = 0.0    # reduced-vs-projector relative difference


@dataclass
class SolveResult:
    p: np.ndarray
    q: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    records: list
    pcg_total: int = 0
    max_unit_dev: float = 0.0
    reason: str = "converged"


class LineSearchError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifold calculus
# ---------------------------------------------------------------------------

def riemannian_gradient(q: np.ndarray, gq: np.ndarray) -> np.ndarray:
    """Project per-element ambient quaternion gradients to tangent spaces."""
    return tangent_project(q, gq)


def spd_project(blocks: np.ndarray, workers: int = 1) -> np.ndarray:
    """Clamp the eigenvalues of symmetric blocks to be non-negative.

    Accepts a single (k, k) block or a batch (m, k, k).
    """
    blocks = np.asarray(blocks, dtype=float)
    single = blocks.ndim == 2
    if single:
        blocks = blocks[None]
    sym = 0.5 * (blocks + np.swapaxes(blocks, -1, -2))
    if sym.shape[0] == 0:
        return sym[0] if single else sym

    def clamp(chunk):
        w, v = np.linalg.eigh(chunk)
        w = np.maximum(w, 0.0)
        return (v * w[:, None, :]) @ np.swapaxes(v, 1, 2)

    if workers > 1 and sym.shape[0] > 4 * workers:
        splits = np.array_split(sym, workers)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            out = np.concatenate(list(pool.map(clamp, splits)))
    else:
        out = clamp(sym)
    return out[0] if single else out


def reduced_gradient(q, gp, gq, free):
    """Stack the free elements' gradient into reduced coordinates (6 per
    element): positions verbatim, rotations through the nullspace operator."""
    g_null = nullspace_left(q[free])
    z = np.zeros((int(np.count_nonzero(free)), 6))
    z[:, :3] = gp[free]
    z[:, 3:] = np.einsum("bij,bj->bi", g_null, gq[free])
    return z.reshape(-1)


@dataclass
class _ClampedPieces:
    """SPD-clamped local blocks shared by the reduced and projector paths."""

    bond_i: np.ndarray
    bond_j: np.ndarray
    bond_pp: np.ndarray          # (nb, 6, 6)
    bond_qq_red: np.ndarray      # (nb, 6, 6) reduced rotation blocks
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_pp: np.ndarray          # (np, 6, 6)
    elem_pos: np.ndarray         # (n, 3, 3) mass + collider curvature, clamped
    elem_rot: np.ndarray         # (n,) scalar rotation diagonal, clamped


def build_clamped_pieces(problem: ImplicitProblem, p, q, gq, workers=1) -> _ClampedPieces:
    """Assemble and clamp all local Hessian blocks of the step objective.

    The per-element rotation diagonal collects the quaternion inertia and
    the sphere curvature correction ``-q . grad``; in reduced coordinates
    both are scalar multiples of the identity.
    """
    blocks = problem.hessian_blocks(p, q)
    g_null = nullspace_left(q)

    bond_pp = spd_project(blocks.bond_pp, workers)
    nb = blocks.bond_i.shape[0]
    t_pair = np.zeros((nb, 6, 8))
    if nb:
        t_pair[:, :3, :4] = g_null[blocks.bond_i]
        t_pair[:, 3:, 4:] = g_null[blocks.bond_j]
        qq_red = (t_pair @ blocks.bond_qq) @ np.swapaxes(t_pair, 1, 2)
        qq_red = spd_project(qq_red, workers)
    else:
        qq_red = np.zeros((0, 6, 6))

    pair_pp = spd_project(blocks.pair_pp, workers)

    mp_dt2, mq_dt2 = problem.inertia_diag()
    if np.any(blocks.elem_pp):
        elem_pos = blocks.elem_pp + mp_dt2[:, None, None] * np.eye(3)
        elem_pos = spd_project(elem_pos, workers)
    else:
        # no collider curvature: the position diagonal is the mass alone
        elem_pos = mp_dt2[:, None, None] * np.eye(3)
    curvature = -np.sum(q * gq, axis=1)
    elem_rot = np.maximum(mq_dt2 + curvature, 0.0)
    elem_rot[~problem.free] = 0.0

    return _ClampedPieces(
        bond_i=blocks.bond_i, bond_j=blocks.bond_j,
        bond_pp=bond_pp, bond_qq_red=qq_red,
        pair_i=blocks.pair_i, pair_j=blocks.pair_j, pair_pp=pair_pp,
        elem_pos=elem_pos, elem_rot=elem_rot,
    )


def _free_slots(free):
    slot = np.full(free.shape[0], -1, dtype=np.int64)
    slot[free] = np.arange(int(np.count_nonzero(free)))
    return slot


def _scatter_pair_blocks(rows_acc, cols_acc, vals_acc, idx6, blocks):
    rows = np.broadcast_to(idx6[:, :, None], blocks.shape)
    cols = np.broadcast_to(idx6[:, None, :], blocks.shape)
    valid = (rows >= 0) & (cols >= 0)
    rows_acc.append(rows[valid])
    cols_acc.append(cols[valid])
    vals_acc.append(blocks[valid])


def assemble_reduced_system(pieces: _ClampedPieces, q, free):
    """Reduced Newton matrix (CSR, 6 unknowns per free element) plus the
    6x6 diagonal blocks for the block-Jacobi preconditioner."""
    slot = _free_slots(free)
    m = int(np.count_nonzero(free))
    rows, cols, vals = [], [], []
    pos_diag = np.zeros((m, 3, 3))
    rot_diag = np.zeros((m, 3, 3))

    def pair_idx(ei, ej, offset):
        si, sj = slot[ei], slot[ej]
        base_i = np.where(si >= 0, 6 * si + offset, -1)
        base_j = np.where(sj >= 0, 6 * sj + offset, -1)
        idx = np.full((ei.shape[0], 6), -1, dtype=np.int64)
        for k in range(3):
            idx[:, k] = np.where(base_i >= 0, base_i + k, -1)
            idx[:, 3 + k] = np.where(base_j >= 0, base_j + k, -1)
        return idx, si, sj

    def add_pair(ei, ej, blocks, offset, diag):
        if ei.shape[0] == 0:
            return
        idx6, si, sj = pair_idx(ei, ej, offset)
        _scatter_pair_blocks(rows, cols, vals, idx6, blocks)
        good_i = si >= 0
        good_j = sj >= 0
        np.add.at(diag, si[good_i], blocks[good_i][:, :3, :3])
        np.add.at(diag, sj[good_j], blocks[good_j][:, 3:, 3:])

    add_pair(pieces.bond_i, pieces.bond_j, pieces.bond_pp, 0, pos_diag)
    add_pair(pieces.bond_i, pieces.bond_j, pieces.bond_qq_red, 3, rot_diag)
    add_pair(pieces.pair_i, pieces.pair_j, pieces.pair_pp, 0, pos_diag)

    free_ids = np.nonzero(free)[0]
    pos_diag += pieces.elem_pos[free_ids]
    rot_diag += pieces.elem_rot[free_ids, None, None] * np.eye(3)

    diag = np.zeros((m, 6, 6))
    diag[:, :3, :3] = pos_diag
    diag[:, 3:, 3:] = rot_diag

    slots = slot[free_ids]
    eye3 = np.eye(3)
    for offset, blocks_diag in ((0, pieces.elem_pos[free_ids]),
                                (3, pieces.elem_rot[free_ids, None, None] * eye3)):
        base = (6 * slots + offset)[:, None, None]
        r = base + np.arange(3)[None, :, None]
        c = base + np.arange(3)[None, None, :]
        rows.append(np.broadcast_to(r, blocks_diag.shape).ravel())
        cols.append(np.broadcast_to(c, blocks_diag.shape).ravel())
        vals.append(blocks_diag.ravel())

    from scipy import sparse
    if vals:
        mat = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(6 * m, 6 * m),
        ).tocsr()
    else:
        mat = sparse.csr_matrix((6 * m, 6 * m))
    return mat, diag


def assemble_projector_dense(pieces: _ClampedPieces, q, free):
    """Ambient dense operator equivalent to the reduced system.

    Rotation blocks are pulled back through the nullspace operators, so on
    the tangent subspace this operator acts exactly like the reduced one
    (seven ambient unknowns per element, radial directions in its kernel).
    """
    slot = _free_slots(free)
    m = int(np.count_nonzero(free))
    h = np.zeros((7 * m, 7 * m))
    g_null = nullspace_left(q)

    def add_block(ea, eb, block, offset_a, offset_b):
        sa, sb = slot[ea], slot[eb]
        if sa < 0 or sb < 0:
            return
        ra = 7 * sa + offset_a
        rb = 7 * sb + offset_b
        h[ra:ra + block.shape[0], rb:rb + block.shape[1]] += block

    for k in range(pieces.bond_i.shape[0]):
        ei, ej = int(pieces.bond_i[k]), int(pieces.bond_j[k])
        bpp = pieces.bond_pp[k]
        add_block(ei, ei, bpp[:3, :3], 0, 0)
        add_block(ei, ej, bpp[:3, 3:], 0, 0)
        add_block(ej, ei, bpp[3:, :3], 0, 0)
        add_block(ej, ej, bpp[3:, 3:], 0, 0)
        gi, gj = g_null[ei], g_null[ej]
        red = pieces.bond_qq_red[k]
        add_block(ei, ei, gi.T @ red[:3, :3] @ gi, 3, 3)
        add_block(ei, ej, gi.T @ red[:3, 3:] @ gj, 3, 3)
        add_block(ej, ei, gj.T @ red[3:, :3] @ gi, 3, 3)
        add_block(ej, ej, gj.T @ red[3:, 3:] @ gj, 3, 3)

    for k in range(pieces.pair_i.shape[0]):
        ei, ej = int(pieces.pair_i[k]), int(pieces.pair_j[k])
        ppp = pieces.pair_pp[k]
        add_block(ei, ei, ppp[:3, :3], 0, 0)
        add_block(ei, ej, ppp[:3, 3:], 0, 0)
        add_block(ej, ei, ppp[3:, :3], 0, 0)
        add_block(ej, ej, ppp[3:, 3:], 0, 0)

    for e in np.nonzero(free)[0]:
        add_block(e, e, pieces.elem_pos[e], 0, 0)
        gi = g_null[e]
        add_block(e, e, pieces.elem_rot[e] * (gi.T @ gi), 3, 3)
    return h


def riemannian_hessian_dense(problem: ImplicitProblem, p, q):
    """Unclamped dense manifold Hessian of the step objective.

    Built as ``P Hbar P`` plus the per-element curvature correction, where
    ``P`` projects each quaternion block to its tangent space.  Meant for
    validation and small scenes.
    """
    n = problem.n
    blocks = problem.hessian_blocks(p, q)
    h = np.zeros((7 * n, 7 * n))

    def put(ea, eb, block, off_a, off_b):
        ra, rb = 7 * ea + off_a, 7 * eb + off_b
        h[ra:ra + block.shape[0], rb:rb + block.shape[1]] += block

    for k in range(blocks.bond_i.shape[0]):
        ei, ej = int(blocks.bond_i[k]), int(blocks.bond_j[k])
        bpp, bqq = blocks.bond_pp[k], blocks.bond_qq[k]
        put(ei, ei, bpp[:3, :3], 0, 0)
        put(ei, ej, bpp[:3, 3:], 0, 0)
        put(ej, ei, bpp[3:, :3], 0, 0)
        put(ej, ej, bpp[3:, 3:], 0, 0)
        put(ei, ei, bqq[:4, :4], 3, 3)
        put(ei, ej, bqq[:4, 4:], 3, 3)
        put(ej, ei, bqq[4:, :4], 3, 3)
        put(ej, ej, bqq[4:, 4:], 3, 3)
    for k in range(blocks.pair_i.shape[0]):
        ei, ej = int(blocks.pair_i[k]), int(blocks.pair_j[k])
        ppp = blocks.pair_pp[k]
        put(ei, ei, ppp[:3, :3], 0, 0)
        put(ei, ej, ppp[:3, 3:], 0, 0)
        put(ej, ei, ppp[3:, :3], 0, 0)
        put(ej, ej, ppp[3:, 3:], 0, 0)
    mp_dt2, mq_dt2 = problem.inertia_diag()
    for e in range(n):
        put(e, e, mp_dt2[e] * np.eye(3), 0, 0)
        put(e, e, mq_dt2[e] * np.eye(4), 3, 3)

    gp, gq = problem.gradient(p, q)
    proj = np.zeros((7 * n, 7 * n))
    for e in range(n):
        proj[7 * e:7 * e + 3, 7 * e:7 * e + 3] = np.eye(3)
        qe = q[e]
        proj[7 * e + 3:7 * e + 7, 7 * e + 3:7 * e + 7] = np.eye(4) - np.outer(qe, qe)
    h = proj @ h @ proj
    for e in range(n):
        qe = q[e]
        pe = np.eye(4) - np.outer(qe, qe)
        h[7 * e + 3:7 * e + 7, 7 * e + 3:7 * e + 7] += -float(qe @ gq[e]) * pe
    return h


def nullspace_reduce(q, h_ambient, b_ambient, free=None):
    """Reduce an ambient (7 per element) tangent system to 6 per element.

    Returns ``(h_reduced, b_reduced, recover)`` with ``recover(y)`` mapping
    reduced solutions back to tangent ambient vectors.
    """
    n = q.shape[0]
    if free is None:
        free = np.ones(n, dtype=bool)
    ids = np.nonzero(free)[0]
    m = ids.shape[0]
    t = np.zeros((6 * m, 7 * m))
    g_null = nullspace_left(q)
    for s, e in enumerate(ids):
        t[6 * s:6 * s + 3, 7 * s:7 * s + 3] = np.eye(3)
        t[6 * s + 3:6 * s + 6, 7 * s + 3:7 * s + 7] = g_null[e]
    h_red = t @ h_ambient @ t.T
    b_red = t @ b_ambient
    return h_red, b_red, lambda y: t.T @ y


# ---------------------------------------------------------------------------
# line search and descent loops
# ---------------------------------------------------------------------------

def line_search(problem, p, q, dp, dq, f0, slope, cfg: SolverConfig,
                free, alpha0: float = 1.0):
    """Backtracking with sufficient decrease; geodesic quaternion updates.

    Returns ``(alpha, p_new, q_new, f_new)`` or raises
    :class:`LineSearchError` when the step underflows.
    """
    alpha = alpha0
    # round-off allowance: near convergence the true decrease of a gradient
    # step can fall below the evaluation noise of f
    noise = 8.0 * np.finfo(float).eps * abs(f0)
    while alpha >= cfg.min_alpha:
        p_t = p + alpha * dp
        q_t = q.copy()
        q_t[free] = quat_normalize(geodesic_step(q[free], alpha * dq[free]))
        f_t = problem.value(p_t, q_t)
        if np.isfinite(f_t) and f_t <= f0 + cfg.armijo * alpha * slope + noise:
            return alpha, p_t, q_t, f_t
        alpha *= cfg.shrink
    raise LineSearchError(f"line search failed below alpha={cfg.min_alpha}")


def _direction_from_reduced(y, q, free):
    m = int(np.count_nonzero(free))
    yb = y.reshape(m, 6)
    n = q.shape[0]
    dp = np.zeros((n, 3))
    dq = np.zeros((n, 4))
    dp[free] = yb[:, :3]
    g_null = nullspace_left(q[free])
    dq[free] = np.einsum("bji,bj->bi", g_null, yb[:, 3:])
    return dp, dq


def _unit_deviation(q, free):
    norms = np.linalg.norm(q[free], axis=1)
    return float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0


def minimize_first_order(problem, p0, q0, cfg: SolverConfig) -> SolveResult:
    """Projected gradient descent with geodesic line search."""
    free = problem.free
    p = p0.copy()
    q = q0.copy()
    q[free] = quat_normalize(q[free])
    records = []
    max_dev = _unit_deviation(q, free)
    alpha_prev = None
    gnorm = np.inf
    for it in range(cfg.max_iterations):
        f, gp, gq = problem.value_and_gradient(p, q)
        z = reduced_gradient(q, gp, gq, free)
        gnorm = float(np.linalg.norm(z))
        cnorm = float(np.linalg.norm(unit_constraint(q[free])))
        max_dev = max(max_dev, _unit_deviation(q, free))
        if gnorm < cfg.epsilon:
            records.append(IterationRecord(it, f, gnorm, cnorm))
            return SolveResult(p, q, True, it, gnorm, records, max_unit_dev=max_dev)
        dp, dq = _direction_from_reduced(-z, q, free)
        slope = -gnorm * gnorm
        alpha0 = 1.0 if alpha_prev is None else min(1.0, 2.0 * alpha_prev)
        try:
            alpha, p, q, f = line_search(problem, p, q, dp, dq, f, slope, cfg,
                                         free, alpha0)
        except LineSearchError:
            records.append(IterationRecord(it, f, gnorm, cnorm))
            return SolveResult(p, q, False, it, gnorm, records,
                               max_unit_dev=max_dev, reason="line-search")
        alpha_prev = alpha
        records.append(IterationRecord(it, f, gnorm, cnorm, alpha=alpha))
        max_dev = max(max_dev, _unit_deviation(q, free))
    return SolveResult(p, q, False, cfg.max_iterations, gnorm, records,
                       max_unit_dev=max_dev, reason="max-iterations")


def _newton_direction(problem, pieces, p, q, z, gnorm, cfg: SolverConfig):
    """Solve the reduced Newton system; returns (y, pcg_iterations, gap).

    ``gap`` is the relative difference against the projector-form dense
    solve when that cross-check is enabled.
    """
    free = problem.free
    gap = 0.0
    pcg_iters = 0
    if cfg.linear_mode == "pcg":
        mat, diag = assemble_reduced_system(pieces, q, free)
        precond = BlockJacobi(diag)
        tol = relative_tolerance(gnorm)
        res = pcg(lambda v: mat @ v, -z, precond.apply, tol, cfg.pcg_max_iterations)
        y = res.x
        pcg_iters = res.iterations
    elif cfg.linear_mode == "dense-reduced":
        mat, _ = assemble_reduced_system(pieces, q, free)
        y = np.linalg.lstsq(mat.toarray(), -z, rcond=None)[0]
    elif cfg.linear_mode == "dense-projector":
        y = None
    else:
        raise ValueError(f"unknown linear mode {cfg.linear_mode!r}")

    if cfg.linear_mode == "dense-projector" or cfg.compare_projector:
        h_amb = assemble_projector_dense(pieces, q, free)
        gp_gq = problem.gradient(p, q)
        g_amb = np.zeros(h_amb.shape[0])
        ids = np.nonzero(free)[0]
        gq_proj = riemannian_gradient(q, gp_gq[1])
        for s, e in enumerate(ids):
            g_amb[7 * s:7 * s + 3] = gp_gq[0][e]
            g_amb[7 * s + 3:7 * s + 7] = gq_proj[e]
        dx = np.linalg.lstsq(h_amb, -g_amb, rcond=None)[0]
        n = q.shape[0]
        dp = np.zeros((n, 3))
        dq = np.zeros((n, 4))
        for s, e in enumerate(ids):
            dp[e] = dx[7 * s:7 * s + 3]
            dq[e] = dx[7 * s + 3:7 * s + 7]
        if cfg.linear_mode == "dense-projector":
            return (dp, dq), pcg_iters, gap
        dp_r, dq_r = _direction_from_reduced(y, q, free)
        num = np.sqrt(np.sum((dp_r - dp) ** 2) + np.sum((dq_r - dq) ** 2))
        den = max(np.sqrt(np.sum(dp ** 2) + np.sum(dq ** 2)), 1e-300)
        gap = float(num / den)
    return y, pcg_iters, gap


def minimize_second_order(problem, p0, q0, cfg: SolverConfig) -> SolveResult:
    """Newton on the manifold: clamped blocks, nullspace reduction, PCG."""
    free = problem.free
    p = p0.copy()
    q = q0.copy()
    q[free] = quat_normalize(q[free])
    records = []
    max_dev = _unit_deviation(q, free)
    pcg_total = 0
    gnorm = np.inf
    for it in range(cfg.max_iterations):
        f, gp, gq = problem.value_and_gradient(p, q)
        z = reduced_gradient(q, gp, gq, free)
        gnorm = float(np.linalg.norm(z))
        cnorm = float(np.linalg.norm(unit_constraint(q[free])))
        max_dev = max(max_dev, _unit_deviation(q, free))
        if gnorm < cfg.epsilon:
            records.append(IterationRecord(it, f, gnorm, cnorm))
            return SolveResult(p, q, True, it, gnorm, records, pcg_total,
                               max_unit_dev=max_dev)
        pieces = build_clamped_pieces(problem, p, q, gq, cfg.workers)
        direction, pcg_iters, gap = _newton_direction(
            problem, pieces, p, q, z, gnorm, cfg
        )
        pcg_total += pcg_iters
        if cfg.linear_mode == "dense-projector":
            dp, dq = direction
            gq_proj = riemannian_gradient(q, gq)
            slope = float(np.sum(gp * dp) + np.sum(gq_proj * dq))
        else:
            y = direction
            slope = float(z @ y)
            dp, dq = _direction_from_reduced(y, q, free)
        if not np.isfinite(slope) or slope >= 0.0:
            logger.warning("newton direction not a descent direction; "
                           "falling back to the gradient")
            dp, dq = _direction_from_reduced(-z, q, free)
            slope = -gnorm * gnorm
        try:
            alpha, p, q, f = line_search(problem, p, q, dp, dq, f, slope, cfg, free)
        except LineSearchError:
            records.append(IterationRecord(it, f, gnorm, cnorm,
                                           pcg_iterations=pcg_iters,
                                           direction_gap=gap))
            return SolveResult(p, q, False, it, gnorm, records, pcg_total,
                               max_unit_dev=max_dev, reason="line-search")
        records.append(IterationRecord(it, f, gnorm, cnorm, alpha=alpha,
                                       pcg_iterations=pcg_iters,
                                       direction_gap=gap))
        max_dev = max(max_dev, _unit_deviation(q, free))
    return SolveResult(p, q, False, cfg.max_iterations, gnorm, records, pcg_total,
                       max_unit_dev=max_dev, reason="max-iterations")


# ---------------------------------------------------------------------------
# reference constrained solvers (ambient coordinates, dense Newton)
# ---------------------------------------------------------------------------

def _pack(p, q, free):
    ids = np.nonzero(free)[0]
    x = np.zeros(7 * ids.shape[0])
    for s, e in enumerate(ids):
        x[7 * s:7 * s + 3] = p[e]
        x[7 * s + 3:7 * s + 7] = q[e]
    return x


def _unpack(x, p_tmpl, q_tmpl, free):
    ids = np.nonzero(free)[0]
    p = p_tmpl.copy()
    q = q_tmpl.copy()
    for s, e in enumerate(ids):
        p[e] = x[7 * s:7 * s + 3]
        q[e] = x[7 * s + 3:7 * s + 7]
    return p, q


def _ambient_gradient(problem, p, q):
    gp, gq = problem.gradient(p, q)
    ids = np.nonzero(problem.free)[0]
    g = np.zeros(7 * ids.shape[0])
    for s, e in enumerate(ids):
        g[7 * s:7 * s + 3] = gp[e]
        g[7 * s + 3:7 * s + 7] = gq[e]
    return g


def _ambient_dense_hessian(problem, p, q):
    """Dense ambient Hessian of the step objective over the free elements."""
    n = problem.n
    blocks = problem.hessian_blocks(p, q)
    slot = _free_slots(problem.free)
    m = int(np.count_nonzero(problem.free))
    h = np.zeros((7 * m, 7 * m))

    def put(ea, eb, block, off_a, off_b):
        sa, sb = slot[ea], slot[eb]
        if sa < 0 or sb < 0:
            return
        ra, rb = 7 * sa + off_a, 7 * sb + off_b
        h[ra:ra + block.shape[0], rb:rb + block.shape[1]] += block

    for k in range(blocks.bond_i.shape[0]):
        ei, ej = int(blocks.bond_i[k]), int(blocks.bond_j[k])
        bpp, bqq = blocks.bond_pp[k], blocks.bond_qq[k]
        put(ei, ei, bpp[:3, :3], 0, 0)
        put(ei, ej, bpp[:3, 3:], 0, 0)
        put(ej, ei, bpp[3:, :3], 0, 0)
        put(ej, ej, bpp[3:, 3:], 0, 0)
        put(ei, ei, bqq[:4, :4], 3, 3)
        put(ei, ej, bqq[:4, 4:], 3, 3)
        put(ej, ei, bqq[4:, :4], 3, 3)
        put(ej, ej, bqq[4:, 4:], 3, 3)
    for k in range(blocks.pair_i.shape[0]):
        ei, ej = int(blocks.pair_i[k]), int(blocks.pair_j[k])
        ppp = blocks.pair_pp[k]
        put(ei, ei, ppp[:3, :3], 0, 0)
        put(ei, ej, ppp[:3, 3:], 0, 0)
        put(ej, ei, ppp[3:, :3], 0, 0)
        put(ej, ej, ppp[3:, 3:], 0, 0)
    mp_dt2, mq_dt2 = problem.inertia_diag()
    for e in range(n):
        put(e, e, mp_dt2[e] * np.eye(3), 0, 0)
        put(e, e, mq_dt2[e] * np.eye(4), 3, 3)
    return h


def _shared_measure(problem, p, q_raw):
    """Riemannian gradient norm at the projected iterate plus constraint norm.

    All reference solvers are traced with this common measure so iteration
    counts are comparable with the manifold solvers.
    """
    qn = quat_normalize(q_raw)
    gp, gq = problem.gradient(p, qn)
    z = reduced_gradient(qn, gp, gq, problem.free)
    c = unit_constraint(q_raw[problem.free])
    return float(np.linalg.norm(z)), float(np.linalg.norm(c))


def _clamped_newton_solve(h, g):
    w, v = np.linalg.eigh(0.5 * (h + h.T))
    floor = 1e-8 * max(float(np.max(np.abs(w))), 1e-300)
    w = np.maximum(w, floor)
    return -(v @ ((v.T @ g) / w))


def _backtrack(value_fn, x, d, f0, slope, cfg: SolverConfig):
    alpha = 1.0
    noise = 8.0 * np.finfo(float).eps * abs(f0)
    while alpha >= cfg.min_alpha:
        x_t = x + alpha * d
        f_t = value_fn(x_t)
        if np.isfinite(f_t) and f_t <= f0 + cfg.armijo * alpha * slope + noise:
            return alpha, x_t, f_t
        alpha *= cfg.shrink
    raise LineSearchError("ambient line search underflow")


def _constraint_terms(x, m):
    q = x.reshape(m, 7)[:, 3:]
    return 0.5 * (np.sum(q * q, axis=1) - 1.0)


def minimize_penalty(problem, p0, q0, cfg: SolverConfig, kappa=None) -> SolveResult:
    """Quadratic-penalty relaxation of the unit constraint, ambient Newton."""
    kappa = cfg.penalty_kappa if kappa is None else kappa
    free = problem.free
    m = int(np.count_nonzero(free))
    x = _pack(p0, q0, free)
    records = []
    best = None

    def value(xv):
        p, q = _unpack(xv, p0, q0, free)
        c = _constraint_terms(xv, m)
        return problem.value(p, q) + 0.5 * kappa * float(c @ c)

    gnorm = np.inf
    for it in range(cfg.max_iterations):
        p, q = _unpack(x, p0, q0, free)
        meas, cnorm = _shared_measure(problem, p, q)
        f_phi = problem.value(p, q)
        records.append(IterationRecord(it, f_phi, meas, cnorm))
        if best is None or meas < best[0]:
            best = (meas, cnorm)
        gnorm = meas
        if meas < cfg.epsilon:
            qn = quat_normalize(q)
            return SolveResult(p, qn, True, it, meas, records)
        g = _ambient_gradient(problem, p, q)
        c = _constraint_terms(x, m)
        for s in range(m):
            qs = x[7 * s + 3:7 * s + 7]
            g[7 * s + 3:7 * s + 7] += kappa * c[s] * qs
        h = _ambient_dense_hessian(problem, p, q)
        for s in range(m):
            qs = x[7 * s + 3:7 * s + 7]
            sl = slice(7 * s + 3, 7 * s + 7)
            h[sl, sl] += kappa * (np.outer(qs, qs) + c[s] * np.eye(4))
        d = _clamped_newton_solve(h, g)
        slope = float(g @ d)
        f_pen = value(x)
        try:
            _, x, _ = _backtrack(value, x, d, f_pen, slope, cfg)
        except LineSearchError:
            break
    p, q = _unpack(x, p0, q0, free)
    return SolveResult(p, quat_normalize(q), False, len(records), gnorm, records,
                       reason="max-iterations")


def minimize_lagrange(problem, p0, q0, cfg: SolverConfig) -> SolveResult:
    """Classical multiplier iteration: Newton steps on the Lagrangian in the
    primal variables alternate with dual ascent on the multipliers.

    One scalar multiplier per quaternion.  Without a penalty term the dual
    update converges only linearly (the augmented variant is this method
    plus the stabilizing penalty), which is the behavior this baseline is
    meant to exhibit.  Each primal step is a symmetric dense direct solve;
    small scenes only.
    """
    free = problem.free
    m = int(np.count_nonzero(free))
    x = _pack(p0, q0, free)
    lam = np.zeros(m)
    records = []
    dual_step = 0.01 * cfg.penalty_kappa

    def value(xv, lv):
        p, q = _unpack(xv, p0, q0, free)
        return problem.value(p, q) + float(lv @ _constraint_terms(xv, m))

    gnorm = np.inf
    for it in range(cfg.max_iterations):
        p, q = _unpack(x, p0, q0, free)
        meas, cnorm = _shared_measure(problem, p, q)
        records.append(IterationRecord(it, problem.value(p, q), meas, cnorm))
        gnorm = meas
        if meas < cfg.epsilon:
            return SolveResult(p, quat_normalize(q), True, it, meas, records)
        g = _ambient_gradient(problem, p, q)
        c = _constraint_terms(x, m)
        h = _ambient_dense_hessian(problem, p, q)
        for s in range(m):
            qs = x[7 * s + 3:7 * s + 7]
            sl = slice(7 * s + 3, 7 * s + 7)
            g[sl] += lam[s] * qs
            h[sl, sl] += lam[s] * np.eye(4)
        d = _clamped_newton_solve(h, g)
        slope = float(g @ d)
        try:
            _, x, _ = _backtrack(lambda xv: value(xv, lam), x, d, value(x, lam),
                                 slope, cfg)
        except LineSearchError:
            break
        lam = lam + dual_step * _constraint_terms(x, m)
    p, q = _unpack(x, p0, q0, free)
    return SolveResult(p, quat_normalize(q), False, len(records), gnorm, records,
                       reason="max-iterations")


def minimize_augmented(problem, p0, q0, cfg: SolverConfig, kappa=None) -> SolveResult:
    """Augmented Lagrangian: penalty inner solves, multiplier outer updates.

    Iteration records count total inner Newton iterations so the trace is
    comparable to the other methods.
    """
    kappa = (0.1 * cfg.penalty_kappa) if kappa is None else kappa
    free = problem.free
    m = int(np.count_nonzero(free))
    x = _pack(p0, q0, free)
    lam = np.zeros(m)
    records = []
    total = 0
    gnorm = np.inf

    for outer in range(10):
        def value(xv):
            p, q = _unpack(xv, p0, q0, free)
            c = _constraint_terms(xv, m)
            return problem.value(p, q) + float(lam @ c) + 0.5 * kappa * float(c @ c)

        inner_tol = None
        for _ in range(cfg.max_iterations):
            p, q = _unpack(x, p0, q0, free)
            meas, cnorm = _shared_measure(problem, p, q)
            records.append(IterationRecord(total, problem.value(p, q), meas, cnorm))
            total += 1
            gnorm = meas
            if meas < cfg.epsilon:
                return SolveResult(p, quat_normalize(q), True, total, meas, records)
            if total >= cfg.max_iterations:
                p, q = _unpack(x, p0, q0, free)
                return SolveResult(p, quat_normalize(q), False, total, gnorm,
                                   records, reason="max-iterations")
            g = _ambient_gradient(problem, p, q)
            c = _constraint_terms(x, m)
            mult = lam + kappa * c
            h = _ambient_dense_hessian(problem, p, q)
            for s in range(m):
                qs = x[7 * s + 3:7 * s + 7]
                sl = slice(7 * s + 3, 7 * s + 7)
                g[sl] += mult[s] * qs
                h[sl, sl] += kappa * np.outer(qs, qs) + mult[s] * np.eye(4)
            inner_g = float(np.linalg.norm(g))
            if inner_tol is None:
                # loose inner solves early, tightening with each outer round
                inner_tol = max(cfg.epsilon, 10.0 ** (-outer - 1) * inner_g)
            if inner_g < inner_tol:
                break
            d = _clamped_newton_solve(h, g)
            slope = float(g @ d)
            try:
                _, x, _ = _backtrack(value, x, d, value(x), slope, cfg)
            except LineSearchError:
                break
        lam = lam + kappa * _constraint_terms(x, m)
    p, q = _unpack(x, p0, q0, free)
    return SolveResult(p, quat_normalize(q), False, total, gnorm, records,
                       reason="max-iterations")


MINIMIZERS = {
    "second-order": minimize_second_order,
    "first-order": minimize_first_order,
    "penalty": minimize_penalty,
    "lagrange": minimize_lagrange,
    "augmented": minimize_augmented,
}


# ---------------------------------------------------------------------------
# production step
# ---------------------------------------------------------------------------

@dataclass
class StepReport:
    solve: SolveResult
    broken: list                 # (bond index, sigma, tau) per break
    contact_pairs: int
    energies: dict
    committed: bool


def contact_candidates(scene):
    """Frozen self-contact candidate pairs for one step.

    Candidates come from a broad phase on radii inflated by the expected
    per-step travel, restricted to element pairs in different fragments
    (bonded neighborhoods overlap at rest by construction and must not
    repel each other).
    """
    from .contact import broad_phase

    el = scene.elements
    if scene.k_element <= 0.0 or el.n < 2:
        return np.zeros((0, 2), dtype=np.int64)
    travel = scene.dt * np.linalg.norm(el.v, axis=1)
    travel += scene.dt**2 * float(np.linalg.norm(scene.gravity))
    inflated = el.radius + travel
    cell = 2.0 * float(np.max(inflated)) + 1e-12
    pairs = broad_phase(el.p, inflated, cell)
    if pairs.shape[0] == 0:
        return pairs
    labels = scene.labels.labels
    keep = labels[pairs[:, 0]] != labels[pairs[:, 1]]
    return pairs[keep]


def stable_step(scene, cfg: SolverConfig, method: str = "second-order") -> StepReport:
    """Advance a scene by one implicit step.

    Predictor, manifold Newton solve, velocity update, friction projection,
    then bond stress/fracture/plasticity updates.  On solver failure the
    scene is left untouched (the caller may halve the timestep and retry).
    """
    from .bonds import update_bond_states
    from .contact import apply_friction
    from .geometry import label_components, update_surface_on_break
    from .integrator import PotentialModel, StepContext, step_right_point

    el = scene.elements
    pinned_ids = np.nonzero(el.pinned)[0]
    backup = (el.p[pinned_ids].copy(), el.q[pinned_ids].copy(),
              el.v[pinned_ids].copy(), el.qdot[pinned_ids].copy())

    t_next = scene.time + scene.dt
    if scene.driver is not None:
        scene.driver(el, t_next)

    ctx = StepContext(scene.dt, scene.p_prev.copy(), scene.q_prev.copy(),
                      el.p.copy(), el.q.copy())
    pairs = contact_candidates(scene)
    model = PotentialModel(el, scene.bonds, pairs, scene.colliders,
                           scene.gravity, scene.k_contact, scene.k_element)
    minimize = MINIMIZERS[method]
    result = step_right_point(model, ctx, minimize, cfg)

    if not result.solve.converged:
        el.p[pinned_ids] = backup[0]
        el.q[pinned_ids] = backup[1]
        el.v[pinned_ids] = backup[2]
        el.qdot[pinned_ids] = backup[3]
        energies = {"kinetic": el.kinetic_energy()}
        return StepReport(result.solve, [], int(pairs.shape[0]), energies, False)

    el.p[:] = result.p
    el.q[:] = result.q
    el.v[:] = result.v
    el.qdot[:] = result.qdot

    if scene.mu_s > 0.0 or scene.mu_r > 0.0:
        apply_friction(el, pairs, scene.colliders, scene.k_contact,
                       scene.k_element, scene.mu_s, scene.mu_r, scene.dt)

    events = update_bond_states(scene.bonds, el.p, el.q, scene.youngs, scene.plastic)
    if events:
        update_surface_on_break(scene.surface_flags, scene.bonds,
                                [e[0] for e in events])
        scene.labels = label_components(el.n, scene.bonds)

    scene.p_prev = ctx.p_curr
    scene.q_prev = ctx.q_curr
    scene.time = t_next

    energies = model.energy_breakdown(el.p, el.q)
    energies["kinetic"] = el.kinetic_energy()
    return StepReport(result.solve, events, int(pairs.shape[0]), energies, True)
