"""
Mimic-learning initialization of the cost parameters.

Alternates between (a) solving the unconstrained plan ``gamma_star`` and the
plan ``gamma_hat`` restricted to the cells the side information allows, with
``theta`` frozen, and (b) one gradient step on the scale-free ratio

    (<gamma_hat, C> - <gamma_star, C>) / (<gamma_bar, C> - <gamma_star, C>)

with both plans frozen, ``gamma_bar`` being the uniform coupling. No gradient
flows through the solver.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, maximum_flow

from .core import TransportPlan, as_cost_values, solve
from .costs import cost_matrix, cost_matrix_grad
from .errors import DegenerateGeometryError, InfeasibleMaskError, InstanceError
from .side_info import ForbiddenSet, build_forbidden

# integer resolution of the max-flow feasibility check (fits int32 with slack)
_FLOW_SCALE = 2 ** 29


def _capacities(a, b):
    """Integer node capacities; exact for uniform weights, rounded otherwise."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    n, m = len(a), len(b)
    if np.all(a == 1.0 / n) and np.all(b == 1.0 / m) and n * m < 2 ** 30:
        return np.full(n, m, np.int64), np.full(m, n, np.int64), True
    cap_a = np.maximum(np.rint(a * _FLOW_SCALE), 1).astype(np.int64)
    cap_b = np.maximum(np.rint(b * _FLOW_SCALE), 1).astype(np.int64)
    return cap_a, cap_b, False


def _max_flow(mask, cap_a, cap_b):
    n, m = mask.shape
    big = int(min(cap_a.sum(), cap_b.sum()))
    src, sink = n + m, n + m + 1
    ri, cj = np.nonzero(~mask)
    rows = np.concatenate([np.full(n, src), ri, n + np.arange(m)])
    cols = np.concatenate([np.arange(n), n + cj, np.full(m, sink)])
    caps = np.concatenate([cap_a, np.full(len(ri), big), cap_b])
    graph = sp.csr_matrix((caps.astype(np.int32), (rows, cols)), shape=(n + m + 2, n + m + 2))
    return maximum_flow(graph, src, sink)


def check_feasible(mask, a, b):
    """Raise `InfeasibleMaskError` unless some coupling of ``a`` and ``b`` avoids `mask`.

    Runs a max-flow on the bipartite graph of allowed cells with source
    capacities ``a`` and sink capacities ``b``.
    """
    mask = np.asarray(mask, dtype=bool)
    n, m = mask.shape
    if not mask.any():
        return
    dead_rows = np.flatnonzero(mask.all(axis=1))
    dead_cols = np.flatnonzero(mask.all(axis=0))
    if len(dead_rows) or len(dead_cols):
        raise InfeasibleMaskError(
            f"rows {dead_rows.tolist()} / columns {dead_cols.tolist()} have no allowed cell",
            rows=dead_rows, cols=dead_cols)
    cap_a, cap_b, exact = _capacities(a, b)
    res = _max_flow(mask, cap_a, cap_b)
    slack = 0 if exact else n + m
    if res.flow_value >= min(cap_a.sum(), cap_b.sum()) - slack:
        return
    src, sink = n + m, n + m + 1
    flow = res.flow.tocsr()
    out_a = np.asarray(flow[src, :n].todense()).ravel()
    in_b = np.asarray(flow[n:n + m, sink].todense()).ravel()
    tol = 0 if exact else 1
    bad_rows = np.flatnonzero(cap_a - out_a > tol)
    bad_cols = np.flatnonzero(cap_b - in_b > tol)
    raise InfeasibleMaskError(
        f"allowed support cannot carry the marginals; short rows {bad_rows.tolist()}, "
        f"short columns {bad_cols.tolist()}", rows=bad_rows, cols=bad_cols)


def support_closure(mask, a, b):
    """Extend `mask` by the allowed cells that every feasible coupling leaves empty.

    Such cells exist when the allowed support has no total support, e.g.
    when a group of rows must exactly fill a group of columns. The entropic
    optimum is zero there as well, but scaling iterations approach that zero
    only at a sublinear rate, so masking them up front gives the same plan
    with fast convergence. A zero-flow cell ``(i, j)`` can carry mass in some
    feasible coupling iff ``i`` and ``j`` lie on a common cycle of the
    residual graph of a maximum flow. Only computed for uniform weights,
    where the capacities are exact; otherwise `mask` is returned unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    n, m = mask.shape
    cap_a, cap_b, exact = _capacities(a, b)
    if not exact or not mask.any():
        return mask
    res = _max_flow(mask, cap_a, cap_b)
    flow = res.flow.tocsr()[:n, n:n + m].toarray()
    ri, cj = np.nonzero(~mask)
    used = flow[ri, cj] > 0
    # residual graph on rows 0..n-1 and columns n..n+m-1: row -> column
    # always (uncapacitated), column -> row where flow can be pushed back
    rows = np.concatenate([ri, n + cj[used]])
    cols = np.concatenate([n + cj, ri[used]])
    graph = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n + m, n + m))
    _, comp = connected_components(graph, directed=True, connection="strong")
    dead = ~used & (comp[ri] != comp[n + cj])
    if not dead.any():
        return mask
    out = mask.copy()
    out[ri[dead], cj[dead]] = True
    return out


def _mask_of(forb, shape):
    mask = forb.mask if isinstance(forb, ForbiddenSet) else np.asarray(forb, dtype=bool)
    if mask.shape != tuple(shape):
        raise InstanceError(f"forbidden mask shape {mask.shape} does not match {tuple(shape)}")
    return mask


def constrained_sinkhorn(problem, cost, forb, *, tol=None, relaxation=1.0, anneal=False,
                         check=True):
    """Entropic OT restricted to the cells outside `forb`.

    The forbidden cells get a zero kernel entry (infinite cost), so the
    result vanishes there exactly. With an empty forbidden set this is the
    same computation as `sinkhorn`. With ``check`` the mask is first tested
    for feasibility and then extended by `support_closure`.
    """
    mask = _mask_of(forb, problem.shape)
    if check:
        a, b = problem.source.weights, problem.target.weights
        check_feasible(mask, a, b)
        mask = support_closure(mask, a, b)
    return solve(problem, cost, mask=mask, tol=tol, relaxation=relaxation, anneal=anneal)


def uniform_plan(n_x, n_y):
    return np.full((n_x, n_y), 1.0 / (n_x * n_y))


@dataclass
class MimicState:
    theta: np.ndarray
    gamma_star: TransportPlan
    gamma_hat: TransportPlan
    gamma_bar: np.ndarray
    loss_history: list = field(default_factory=list)


def _plans(state_or_plans):
    if isinstance(state_or_plans, MimicState):
        s = state_or_plans
        return s.gamma_star, s.gamma_hat, s.gamma_bar
    return state_or_plans


def _g(p):
    return p.gamma if isinstance(p, TransportPlan) else np.asarray(p, dtype=float)


def mimic_loss_and_cost_grad(state, cost):
    """Ratio loss and its gradient with respect to the cost matrix (plans frozen)."""
    g_star, g_hat, g_bar = (_g(p) for p in _plans(state))
    C = as_cost_values(cost)
    if not (g_star.shape == g_hat.shape == g_bar.shape == C.shape):
        raise InstanceError("plans and cost matrix must share one shape")
    num_mat = g_hat - g_star
    den_mat = g_bar - g_star
    num = float(np.sum(num_mat * C))
    den = float(np.sum(den_mat * C))
    eps = 1e-9 * float(C.max() - C.min())
    if not abs(den) > eps:
        raise DegenerateGeometryError(
            f"mimic-loss denominator {den:.3g} is below {eps:.3g}; the uniform plan is already optimal")
    return num / den, (num_mat * den - num * den_mat) / den ** 2


def mimic_loss(state, cost):
    """``(<g_hat, C> - <g_star, C>) / (<g_bar, C> - <g_star, C>)``.

    `state` is a `MimicState` or a ``(gamma_star, gamma_hat, gamma_bar)`` tuple.
    """
    return mimic_loss_and_cost_grad(state, cost)[0]


def mimic_init(problem, model, corr, steps=10, step_size=1.0, *, solver_iters=None,
               tol=None, relaxation=1.0, anneal=False, return_state=False):
    """Alternating mimic-learning updates starting from ``model.theta``.

    Parameters
    ----------
    problem : AlignmentProblem
    model : PolyCostModel or MlpCostModel
    corr : Correspondence or ForbiddenSet
    steps, step_size : int, float
        Number and size of the gradient steps on the ratio loss.
    solver_iters, tol, relaxation
        Settings of the two plan solves. By default they match `problem`
        (same ``lam`` and iteration count). Since nothing is differentiated
        here, a larger ``solver_iters`` with ``tol`` and over-relaxation
        gives plans much closer to the true argmins at large ``lam``.
    anneal : bool
        Solve both plans with ``lam`` annealing (see `otsi.core.solve`).
        Without it, instances whose optimal plan is nearly a vertex of the
        transport polytope may stay far from feasible at large ``lam``,
        and the loss can then dip below zero.

    Returns
    -------
    ndarray or MimicState
        The final parameter vector, or the final state with ``return_state``.
        ``loss_history`` holds ``steps + 1`` values: the loss at every
        iterate including the last one.
    """
    forb = corr if isinstance(corr, ForbiddenSet) else build_forbidden(corr, *problem.shape)
    X, Y = problem.source, problem.target
    solver = problem if solver_iters is None else replace(problem, sinkhorn_iters=int(solver_iters))
    g_bar = uniform_plan(*problem.shape)
    theta = np.array(model.theta, dtype=float)
    state = MimicState(theta=theta, gamma_star=None, gamma_hat=None, gamma_bar=g_bar)
    if len(forb) == 0:
        state.loss_history = [0.0] * (steps + 1)
        return state if return_state else theta
    check_feasible(forb.mask, X.weights, Y.weights)
    mask = support_closure(forb.mask, X.weights, Y.weights)
    for t in range(steps + 1):
        current = model.with_theta(theta)
        C = cost_matrix(current, X, Y).values
        state.gamma_star = solve(solver, C, tol=tol, relaxation=relaxation, anneal=anneal)
        state.gamma_hat = solve(solver, C, mask=mask, tol=tol, relaxation=relaxation,
                                 anneal=anneal)
        loss, dC = mimic_loss_and_cost_grad(state, C)
        state.loss_history.append(loss)
        if t == steps:
            break
        theta = theta - step_size * cost_matrix_grad(current, X, Y, dC)
        state.theta = theta
    return state if return_state else theta
