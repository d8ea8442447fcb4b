"""Discrete-Lagrangian time stepping: the incremental potential and the
mid-point, left-point, and right-point update rules.

The right-point rule is the production path: the next state is the
minimizer of

    Phi(x) = 1/(2 dt^2) (x - xhat)^T M (x - xhat) + V(x),

with ``xhat = 2 x_curr - x_prev`` the inertial predictor, so the stationary
condition reproduces ``M (x - xhat)/dt^2 + grad V(x) = 0``.  Pinned elements
are excluded from the inertia term and held at their prescribed states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import contact as contact_mod
from .quat import geodesic_step, quat_normalize, tangent_project


@dataclass
class PotentialBlocks:
    """Second-derivative blocks of the potential, keyed by element indices."""

    bond_i: np.ndarray
    bond_j: np.ndarray
    bond_pp: np.ndarray          # (nb, 6, 6) positions of (i, j)
    bond_qq: np.ndarray          # (nb, 8, 8) quaternions of (i, j)
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_pp: np.ndarray          # (np, 6, 6) self-contact position blocks
    elem_pp: np.ndarray          # (n, 3, 3) collider contact blocks


class PotentialModel:
    """Total potential energy V of a scene state: bonds, contacts, gravity.

    The self-contact candidate set is fixed at construction; candidates only
    contribute while actually overlapping, so freezing the set keeps V
    well-defined throughout one implicit solve.
    """

    def __init__(self, elements, bonds, pairs, colliders, gravity,
                 k_contact: float, k_element: float):
        self.elements = elements
        self.bonds = bonds
        self.pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        self.colliders = list(colliders)
        self.gravity = np.asarray(gravity, dtype=float)
        self.k_contact = k_contact
        self.k_element = k_element

    def _contact_terms(self, p, want_hess, want_grad=True):
        e = 0.0
        gp = np.zeros_like(p) if (want_grad or want_hess) else None
        pair_pp = None
        elem_pp = None
        radius = self.elements.radius
        if self.pairs.shape[0]:
            ii, jj = self.pairs[:, 0], self.pairs[:, 1]
            es, g_i, g_j, hpp = contact_mod.self_repulsion_terms(
                p[ii], p[jj], radius[ii], radius[jj], self.k_element,
                want_hess, want_grad or want_hess,
            )
            e += float(np.sum(es))
            if gp is not None:
                np.add.at(gp, ii, g_i)
                np.add.at(gp, jj, g_j)
            pair_pp = hpp
        if self.colliders:
            if want_hess:
                elem_pp = np.zeros((p.shape[0], 3, 3))
            for collider in self.colliders:
                ec, gc, hc = contact_mod.external_repulsion_terms(
                    p, collider, self.k_contact, want_hess, want_grad or want_hess
                )
                e += float(np.sum(ec))
                if gp is not None:
                    gp += gc
                if want_hess:
                    elem_pp += hc
        return e, gp, pair_pp, elem_pp

    def value(self, p, q) -> float:
        idx, eb, *_ = self.bonds.energy_terms(p, q, want_grad=False)
        e = float(np.sum(eb))
        ec, _, _, _ = self._contact_terms(p, want_hess=False, want_grad=False)
        e += ec
        e -= float(np.sum(self.elements.mass * (p @ self.gravity)))
        return e

    def value_and_gradient(self, p, q):
        gp = np.zeros_like(p)
        gq = np.zeros((p.shape[0], 4))
        idx, eb, gpi, gpj, gqi, gqj, _, _ = self.bonds.energy_terms(p, q)
        if idx.size:
            np.add.at(gp, self.bonds.i[idx], gpi)
            np.add.at(gp, self.bonds.j[idx], gpj)
            np.add.at(gq, self.bonds.i[idx], gqi)
            np.add.at(gq, self.bonds.j[idx], gqj)
        ec, gc, _, _ = self._contact_terms(p, want_hess=False)
        gp += gc
        gp -= self.elements.mass[:, None] * self.gravity
        e = float(np.sum(eb)) + ec
        e -= float(np.sum(self.elements.mass * (p @ self.gravity)))
        return e, gp, gq

    def gradient(self, p, q):
        _, gp, gq = self.value_and_gradient(p, q)
        return gp, gq

    def hessian_blocks(self, p, q) -> PotentialBlocks:
        idx, _, _, _, _, _, hpp, hqq = self.bonds.energy_terms(p, q, want_hess=True)
        _, _, pair_pp, elem_pp = self._contact_terms(p, want_hess=True)
        n = p.shape[0]
        if pair_pp is None:
            pair_pp = np.zeros((0, 6, 6))
        if elem_pp is None:
            elem_pp = np.zeros((n, 3, 3))
        return PotentialBlocks(
            bond_i=self.bonds.i[idx], bond_j=self.bonds.j[idx],
            bond_pp=hpp if hpp is not None else np.zeros((0, 6, 6)),
            bond_qq=hqq if hqq is not None else np.zeros((0, 8, 8)),
            pair_i=self.pairs[:, 0], pair_j=self.pairs[:, 1],
            pair_pp=pair_pp, elem_pp=elem_pp,
        )

    def energy_breakdown(self, p, q):
        idx, eb, *_ = self.bonds.energy_terms(p, q)
        ec, _, _, _ = self._contact_terms(p, want_hess=False)
        return {
            "bond": float(np.sum(eb)),
            "contact": ec,
            "gravity": -float(np.sum(self.elements.mass * (p @ self.gravity))),
        }


@dataclass
class StepContext:
    """Two-point history of one implicit step."""

    dt: float
    p_prev: np.ndarray
    q_prev: np.ndarray
    p_curr: np.ndarray
    q_curr: np.ndarray
    p_hat: np.ndarray = field(default=None)
    q_hat: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.p_hat is None:
            self.p_hat = 2.0 * self.p_curr - self.p_prev
        if self.q_hat is None:
            # used only as the quadratic anchor of the inertia term; the
            # manifold machinery keeps actual iterates unit
            self.q_hat = 2.0 * self.q_curr - self.q_prev


class ImplicitProblem:
    """Incremental potential of the right-point rule over the free elements."""

    def __init__(self, model: PotentialModel, ctx: StepContext):
        self.model = model
        self.ctx = ctx
        elements = model.elements
        self.free = ~elements.pinned
        dt2 = ctx.dt * ctx.dt
        self.mp_dt2 = np.where(self.free, elements.mass / dt2, 0.0)
        self.mq_dt2 = np.where(self.free, elements.rot_mass / dt2, 0.0)

    @property
    def n(self) -> int:
        return self.model.elements.n

    def _check(self, p, q):
        if p.shape != self.ctx.p_curr.shape or q.shape != self.ctx.q_curr.shape:
            raise ValueError("state dimension mismatch with the step context")

    def _inertia(self, p, q):
        dp = p - self.ctx.p_hat
        dq = q - self.ctx.q_hat
        e = 0.5 * float(np.sum(self.mp_dt2 * np.sum(dp * dp, axis=1)))
        e += 0.5 * float(np.sum(self.mq_dt2 * np.sum(dq * dq, axis=1)))
        return e

    def value(self, p, q) -> float:
        self._check(p, q)
        return self._inertia(p, q) + self.model.value(p, q)

    def value_and_gradient(self, p, q):
        self._check(p, q)
        e, gp, gq = self.model.value_and_gradient(p, q)
        gp = gp + self.mp_dt2[:, None] * (p - self.ctx.p_hat)
        gq = gq + self.mq_dt2[:, None] * (q - self.ctx.q_hat)
        return e + self._inertia(p, q), gp, gq

    def gradient(self, p, q):
        _, gp, gq = self.value_and_gradient(p, q)
        return gp, gq

    def hessian_blocks(self, p, q) -> PotentialBlocks:
        return self.model.hessian_blocks(p, q)

    def inertia_diag(self):
        return self.mp_dt2, self.mq_dt2


def incremental_potential(p_next, q_next, problem: ImplicitProblem) -> float:
    """Value of the incremental potential at a candidate next state."""
    return problem.value(p_next, q_next)


class MidpointProblem(ImplicitProblem):
    """Objective whose stationary point is the mid-point update.

    The potential is sampled at the average of the candidate and current
    states, plus a fixed linear term from the trailing half-step, so the
    gradient reproduces the mid-point stationarity condition.
    """

    def __init__(self, model: PotentialModel, ctx: StepContext):
        super().__init__(model, ctx)
        pm = 0.5 * (ctx.p_prev + ctx.p_curr)
        qm = 0.5 * (ctx.q_prev + ctx.q_curr)
        self._gp_prev, self._gq_prev = model.gradient(pm, qm)

    def value(self, p, q) -> float:
        self._check(p, q)
        vm = self.model.value(0.5 * (p + self.ctx.p_curr), 0.5 * (q + self.ctx.q_curr))
        linear = 0.5 * float(np.sum(self._gp_prev * p) + np.sum(self._gq_prev * q))
        return self._inertia(p, q) + vm + linear

    def value_and_gradient(self, p, q):
        self._check(p, q)
        vm, gp, gq = self.model.value_and_gradient(
            0.5 * (p + self.ctx.p_curr), 0.5 * (q + self.ctx.q_curr)
        )
        linear = 0.5 * float(np.sum(self._gp_prev * p) + np.sum(self._gq_prev * q))
        gp = 0.5 * gp + 0.5 * self._gp_prev + self.mp_dt2[:, None] * (p - self.ctx.p_hat)
        gq = 0.5 * gq + 0.5 * self._gq_prev + self.mq_dt2[:, None] * (q - self.ctx.q_hat)
        return self._inertia(p, q) + vm + linear, gp, gq

    def hessian_blocks(self, p, q) -> PotentialBlocks:
        blocks = self.model.hessian_blocks(0.5 * (p + self.ctx.p_curr),
                                           0.5 * (q + self.ctx.q_curr))
        return PotentialBlocks(
            bond_i=blocks.bond_i, bond_j=blocks.bond_j,
            bond_pp=0.25 * blocks.bond_pp, bond_qq=0.25 * blocks.bond_qq,
            pair_i=blocks.pair_i, pair_j=blocks.pair_j,
            pair_pp=0.25 * blocks.pair_pp, elem_pp=0.25 * blocks.elem_pp,
        )


@dataclass
class StepResult:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    qdot: np.ndarray
    solve: object


def predict_state(ctx: StepContext, v, qdot, free):
    """Flat position predictor and geodesic orientation predictor."""
    p0 = ctx.p_curr.copy()
    q0 = ctx.q_curr.copy()
    p0[free] += ctx.dt * v[free]
    q0[free] = geodesic_step(ctx.q_curr[free], ctx.dt * qdot[free])
    return p0, quat_normalize(q0)


def step_right_point(model: PotentialModel, ctx: StepContext, minimize, cfg) -> StepResult:
    """One implicit step: minimize the incremental potential, update rates.

    ``minimize(problem, p0, q0, cfg)`` must return an object with ``p``,
    ``q`` attributes (a solver result).  Velocities are the divided
    differences of the accepted states; the quaternion rate is projected
    onto the tangent space of the new orientation.
    """
    problem = ImplicitProblem(model, ctx)
    elements = model.elements
    p0, q0 = predict_state(ctx, elements.v, elements.qdot, problem.free)
    result = minimize(problem, p0, q0, cfg)
    v = (result.p - ctx.p_curr) / ctx.dt
    qdot = tangent_project(result.q, (result.q - ctx.q_curr) / ctx.dt)
    v[~problem.free] = elements.v[~problem.free]
    qdot[~problem.free] = elements.qdot[~problem.free]
    return StepResult(result.p, result.q, v, qdot, result)


def step_mid_point(model: PotentialModel, ctx: StepContext, minimize, cfg) -> StepResult:
    """Mid-point variational update; retained for energy-behavior studies."""
    problem = MidpointProblem(model, ctx)
    elements = model.elements
    p0, q0 = predict_state(ctx, elements.v, elements.qdot, problem.free)
    result = minimize(problem, p0, q0, cfg)
    v = (result.p - ctx.p_curr) / ctx.dt
    qdot = tangent_project(result.q, (result.q - ctx.q_curr) / ctx.dt)
    v[~problem.free] = elements.v[~problem.free]
    qdot[~problem.free] = elements.qdot[~problem.free]
    return StepResult(result.p, result.q, v, qdot, result)


def step_left_point(model: PotentialModel, ctx: StepContext):
    """Explicit left-point update; unstable beyond the stiffness limit."""
    elements = model.elements
    free = ~elements.pinned
    gp, gq = model.gradient(ctx.p_curr, ctx.q_curr)
    dt2 = ctx.dt * ctx.dt
    p_next = ctx.p_curr.copy()
    q_next = ctx.q_curr.copy()
    p_next[free] = ctx.p_hat[free] - dt2 * gp[free] / elements.mass[free, None]
    q_next[free] = ctx.q_hat[free] - dt2 * gq[free] / elements.rot_mass[free, None]
    return p_next, quat_normalize(q_next)
