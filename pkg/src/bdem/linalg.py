"""Block-sparse symmetric solves: preconditioned conjugate gradient with a
relative-error termination rule and a block-Jacobi preconditioner.

The system operator is passed as a callable so callers may apply an
assembled sparse matrix or rebuild products on the fly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

logger = logging.getLogger(__name__)


@dataclass
class PCGResult:
    x: np.ndarray
    iterations: int
    converged: bool
    relative_residual: float
    restarts: int = 0


def relative_tolerance(grad_norm: float) -> float:
    """Inner-solve relative tolerance ``min(0.5, sqrt(grad_norm))``.

    Loose while the outer Newton residual is large, tightening as it
    shrinks.
    """
    if grad_norm < 0.0:
        raise ValueError("gradient norm must be non-negative")
    return min(0.5, math.sqrt(grad_norm))


def pcg(apply_a, b, apply_m=None, tol_rel=1e-10, max_iter=None, on_iteration=None):
    """Preconditioned conjugate gradient for symmetric PSD systems.

    Terminates when ``|A x - b| / |b| <= tol_rel`` or after ``max_iter``
    iterations.  A non-positive curvature ``p^T A p`` restarts the solve on
    a diagonally boosted operator (logged).  ``on_iteration(k, x, r)`` is a
    diagnostics hook.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * n
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return PCGResult(np.zeros(n), 0, True, 0.0)
    if apply_m is None:
        apply_m = lambda v: v

    boost = 0.0
    restarts = 0
    while True:
        x = np.zeros(n)
        r = b.copy()
        z = apply_m(r)
        p = z.copy()
        rz = float(r @ z)
        broke_down = False
        k = 0
        rel = 1.0
        while k < max_iter:
            ap = apply_a(p)
            if boost:
                ap = ap + boost * p
            pap = float(p @ ap)
            if pap <= 0.0:
                broke_down = True
                scale = float(np.linalg.norm(ap)) / max(float(np.linalg.norm(p)), 1e-300)
                boost = max(boost * 100.0, 1e-10 * max(scale, 1.0))
                break
            alpha = rz / pap
            x += alpha * p
            r -= alpha * ap
            k += 1
            rel = float(np.linalg.norm(r)) / b_norm
            if on_iteration is not None:
                on_iteration(k, x, r)
            if rel <= tol_rel:
                return PCGResult(x, k, True, rel, restarts)
            z = apply_m(r)
            rz_new = float(r @ z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        if not broke_down:
            return PCGResult(x, k, False, rel, restarts)
        restarts += 1
        logger.warning("pcg breakdown; restarting with diagonal boost %.3e", boost)
        if restarts > 3:
            return PCGResult(x, k, False, rel, restarts)


class BlockJacobi:
    """Inverse of the block diagonal; singular blocks fall back to identity."""

    def __init__(self, diag_blocks: np.ndarray):
        diag_blocks = np.asarray(diag_blocks, dtype=float)
        m, k, _ = diag_blocks.shape
        self.block_size = k
        sym = 0.5 * (diag_blocks + np.swapaxes(diag_blocks, 1, 2))
        eigvals = np.linalg.eigvalsh(sym) if m else np.zeros((0, k))
        bad = np.zeros(m, dtype=bool)
        if m:
            scale = np.maximum(np.abs(eigvals).max(axis=1), 1e-300)
            bad = eigvals.min(axis=1) <= 1e-12 * scale
        inv = np.empty_like(sym)
        good = ~bad
        if np.any(good):
            inv[good] = np.linalg.inv(sym[good])
        if np.any(bad):
            logger.warning("block-jacobi: %d singular blocks fall back to identity",
                           int(bad.sum()))
            inv[bad] = np.eye(k)
        self.inverse_blocks = inv

    def apply(self, x: np.ndarray) -> np.ndarray:
        m = self.inverse_blocks.shape[0]
        xb = x.reshape(m, self.block_size)
        return np.einsum("bij,bj->bi", self.inverse_blocks, xb).reshape(-1)

    __call__ = apply


def block_coo(block_rows, block_cols, blocks, block_size: int, n_scalar: int):
    """Assemble square CSR from equally sized dense blocks.

    ``block_rows``/``block_cols`` index block slots; duplicate entries sum.
    """
    blocks = np.asarray(blocks, dtype=float)
    k = block_size
    if blocks.size == 0:
        return sparse.csr_matrix((n_scalar, n_scalar))
    rows = (np.asarray(block_rows) * k)[:, None, None] + np.arange(k)[None, :, None]
    cols = (np.asarray(block_cols) * k)[:, None, None] + np.arange(k)[None, None, :]
    rows = np.broadcast_to(rows, blocks.shape).ravel()
    cols = np.broadcast_to(cols, blocks.shape).ravel()
    mat = sparse.coo_matrix((blocks.ravel(), (rows, cols)), shape=(n_scalar, n_scalar))
    return mat.tocsr()


def dump_triplets(matrix, path):
    """Write a sparse matrix as '<row> <col> <value>' text lines."""
    coo = sparse.coo_matrix(matrix)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        for r, c, v in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {v!r}\n")
