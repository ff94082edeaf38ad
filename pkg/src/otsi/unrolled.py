"""
Reverse-mode gradients through a fixed number of Sinkhorn iterations.

The forward pass records, for every half-step, the exponentiated potential
drift ``e`` and the scaling sum ``s`` (or, over the memory budget, periodic
engine snapshots from which segments are recomputed). Each half-step
``f_i = log a_i + f_ref_i - log(sum_j M_ij e_j)`` has the softmax Jacobian
``-diag(1/s) M diag(e)`` with respect to the log-kernel, so the backward
pass only needs matrix-vector products and one rank-k update per kernel
reference.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import (CONVERGED_TOL, SinkhornEngine, TransportPlan, as_cost_values,
                   log_kernel, marginal_deviation, stabilized_kernel, _check_instance)
from .costs import cost_matrix, cost_matrix_grad
from .errors import InstanceError
from .side_info import Correspondence, ForbiddenSet, SideInfoWarning, build_forbidden

# floats the per-half-step records may occupy before switching to checkpointing
DEFAULT_MEMORY_BUDGET = 2 ** 24


@dataclass
class UnrolledTape:
    """Everything the backward pass needs from one forward Sinkhorn run."""

    problem: object
    cost: np.ndarray
    mask: np.ndarray
    logK: np.ndarray
    relaxation: float
    gamma: np.ndarray
    records: list = None
    refs: dict = None
    snapshots: list = field(default_factory=list)
    segment: int = 0

    @property
    def shape(self):
        return self.gamma.shape

    def _engine(self):
        a, b = self.problem.source.weights, self.problem.target.weights
        return SinkhornEngine(self.logK, np.log(a), np.log(b), self.relaxation)

    def replay(self):
        """Re-run the forward pass; returns the final plan."""
        eng = self._engine()
        for _ in range(self.problem.sinkhorn_iters):
            eng.step()
        return eng.plan()

    def segments(self):
        """``(records, refs)`` chunks in reverse chronological order."""
        if self.records is not None:
            yield self.records, self.refs
            return
        n_iter = self.problem.sinkhorn_iters
        for k in range(len(self.snapshots) - 1, -1, -1):
            eng = self._engine()
            eng.restore(self.snapshots[k])
            stop = min(n_iter, (k + 1) * self.segment)
            rec = []
            for _ in range(eng.t, stop):
                eng.step(rec)
            yield rec, eng.refs


def sinkhorn_forward(problem, cost, *, mask=None, relaxation=1.0,
                     memory_budget=DEFAULT_MEMORY_BUDGET):
    """Fixed-length Sinkhorn run that also returns a tape for `plan_vjp`."""
    C = as_cost_values(cost)
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    _check_instance(problem, C, mask)
    a, b = problem.source.weights, problem.target.weights
    logK, shift = log_kernel(problem, C, mask)
    eng = SinkhornEngine(logK, np.log(a), np.log(b), relaxation)
    n, m = C.shape
    n_iter = problem.sinkhorn_iters
    tape = UnrolledTape(problem=problem, cost=C, mask=mask, logK=logK,
                        relaxation=relaxation, gamma=None)
    if 2 * n_iter * (n + m) <= memory_budget:
        tape.records = []
        for _ in range(n_iter):
            eng.step(tape.records)
        tape.refs = eng.refs
    else:
        tape.segment = max(1, math.isqrt(n_iter))
        for t in range(n_iter):
            if t % tape.segment == 0:
                tape.snapshots.append(eng.snapshot())
            eng.step()
    gamma = eng.plan()
    tape.gamma = gamma
    err = marginal_deviation(gamma, a, b)
    plan = TransportPlan(gamma=gamma, dual_u=eng.f / problem.lam + shift,
                         dual_v=eng.g / problem.lam, converged=bool(err < CONVERGED_TOL),
                         marginal_error=err, n_iter=eng.t)
    return plan, tape


def _backward_segment(records, refs, logK, fbar, gbar, Kbar):
    current, M = None, None
    left, right = [], []

    def flush():
        if left:
            Kbar[...] -= M * (np.column_stack(left) @ np.column_stack(right).T)
            left.clear()
            right.clear()

    for kind, rid, e, s, w in reversed(records):
        if rid != current:
            flush()
            current = rid
            M = stabilized_kernel(logK, *refs[rid])
        if kind == "g":
            q = w * gbar / s
            fbar = fbar - e * (M @ q)
            left.append(e)
            right.append(q)
            gbar = (1.0 - w) * gbar
        else:
            p = w * fbar / s
            gbar = gbar - e * (M.T @ p)
            left.append(p)
            right.append(e)
            fbar = (1.0 - w) * fbar
    flush()
    return fbar, gbar


def plan_vjp(tape, upstream):
    """Gradient of ``sum(upstream * gamma)`` with respect to the cost matrix.

    Exact for the unrolled map (the finite number of iterations actually
    run), not for its infinite-iteration limit.
    """
    U = np.asarray(upstream, dtype=float)
    if U.shape != tape.shape:
        raise InstanceError(f"upstream shape {U.shape} does not match plan shape {tape.shape}")
    Gbar = U * tape.gamma
    Kbar = Gbar.copy()
    fbar, gbar = Gbar.sum(axis=1), Gbar.sum(axis=0)
    for records, refs in tape.segments():
        fbar, gbar = _backward_segment(records, refs, tape.logK, fbar, gbar, Kbar)
    Cbar = -tape.problem.lam * Kbar
    if tape.mask is not None:
        Cbar[tape.mask] = 0.0
    return Cbar


def _forbidden_for(problem, side_info):
    if isinstance(side_info, ForbiddenSet):
        if side_info.shape != problem.shape:
            raise InstanceError(f"forbidden set shape {side_info.shape} does not match {problem.shape}")
        return side_info
    if isinstance(side_info, Correspondence):
        return build_forbidden(side_info, *problem.shape)
    raise TypeError("side information must be a Correspondence or ForbiddenSet")


def loss_grad(problem, model, side_info, *, return_plan=False,
              memory_budget=DEFAULT_MEMORY_BUDGET):
    """Side-information loss and its exact gradient with respect to ``model.theta``.

    ``loss = sum over forbidden cells of gamma_ij(theta)^2`` where ``gamma``
    is the plan after ``problem.sinkhorn_iters`` iterations under
    ``C(theta)``.

    Returns ``(loss, grad)``, or ``(loss, grad, plan)`` with ``return_plan``.
    """
    forb = _forbidden_for(problem, side_info)
    C = cost_matrix(model, problem.source, problem.target)
    if len(forb) == 0:
        warnings.warn("empty forbidden set: the side-information loss is identically zero",
                      SideInfoWarning, stacklevel=2)
        out = (0.0, np.zeros_like(model.theta))
        if return_plan:
            from .core import solve
            out += (solve(problem, C),)
        return out
    plan, tape = sinkhorn_forward(problem, C, memory_budget=memory_budget)
    G = plan.gamma
    loss = float(np.sum(G[forb.mask] ** 2))
    Cbar = plan_vjp(tape, 2.0 * G * forb.mask)
    grad = cost_matrix_grad(model, problem.source, problem.target, Cbar)
    return (loss, grad, plan) if return_plan else (loss, grad)
