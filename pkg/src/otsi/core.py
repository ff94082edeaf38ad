"""
Entropic optimal transport between two weighted point clouds.

The solver works on scaled dual potentials ``f = lam * u`` and ``g = lam * v``
kept in the log domain. Each half-step is evaluated against a stabilized
kernel ``exp(logK + f_ref + g_ref)`` that is re-absorbed whenever the
potentials drift far from the reference, so a single iteration costs two
matrix-vector products instead of two dense log-sum-exp passes, while never
overflowing at large ``lam``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, InstanceError

# a half-step re-absorbs once potentials drift this far from the reference
_DRIFT = 50.0
# scaling sums below this are treated as lost to underflow
_TINY = 1e-150
# default marginal error under which a plan is flagged converged
CONVERGED_TOL = 1e-6
# annealing starts at the lam where lam * (cost range) drops below this
_ANNEAL_START = 10.0


def _readonly(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Weighted sample of ``n`` points in ``d`` dimensions.

    ``weights`` defaults to the uniform probability vector.
    """

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] < 1:
            raise InputError(f"points must be a non-empty n x d matrix, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InputError("points contain NaN or Inf")
        n = pts.shape[0]
        if self.weights is None:
            w = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=float).ravel()
            if w.shape != (n,):
                raise InstanceError(f"weights length {w.shape[0]} does not match {n} points")
            if np.any(w <= 0) or not np.all(np.isfinite(w)):
                raise InputError("weights must be positive and finite")
            if abs(w.sum() - 1.0) > 1e-12:
                raise InputError(f"weights must sum to 1 (got {w.sum():.17g})")
        object.__setattr__(self, "points", _readonly(pts))
        object.__setattr__(self, "weights", _readonly(w))

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def d(self):
        return self.points.shape[1]


@dataclass(frozen=True)
class AlignmentProblem:
    """Source and target clouds plus the entropic regularization settings.

    ``lam`` multiplies the cost inside the Gibbs kernel ``exp(-lam * C)``,
    so larger values mean weaker smoothing.
    """

    source: PointCloud
    target: PointCloud
    lam: float = 1e3
    sinkhorn_iters: int = 200

    def __post_init__(self):
        if not (self.lam > 0 and np.isfinite(self.lam)):
            raise InputError(f"lam must be a positive finite number, got {self.lam}")
        if int(self.sinkhorn_iters) != self.sinkhorn_iters or self.sinkhorn_iters < 1:
            raise InputError(f"sinkhorn_iters must be a positive integer, got {self.sinkhorn_iters}")
        object.__setattr__(self, "sinkhorn_iters", int(self.sinkhorn_iters))

    @property
    def shape(self):
        return (self.source.n, self.target.n)


@dataclass(frozen=True)
class CostMatrix:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise InstanceError(f"cost matrix must be 2-D, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise InputError("cost matrix contains NaN or Inf")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True)
class TransportPlan:
    """A coupling together with the dual potentials that generate it.

    ``gamma[i, j] == exp(lam * (dual_u[i] + dual_v[j] - C[i, j]))``.
    """

    gamma: np.ndarray
    dual_u: np.ndarray
    dual_v: np.ndarray
    converged: bool
    marginal_error: float
    n_iter: int = field(default=0)

    def __post_init__(self):
        for name in ("gamma", "dual_u", "dual_v"):
            object.__setattr__(self, name, _readonly(getattr(self, name)))

    @property
    def shape(self):
        return self.gamma.shape


def as_cost_values(cost):
    """Return the raw cost array for a `CostMatrix` or array-like."""
    if isinstance(cost, CostMatrix):
        return cost.values
    v = np.asarray(cost, dtype=float)
    if v.ndim != 2:
        raise InstanceError(f"cost matrix must be 2-D, got shape {v.shape}")
    return v


def _gamma_of(plan):
    return plan.gamma if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)


def stabilized_kernel(logK, f_ref, g_ref):
    """``exp(logK + f_ref[:, None] + g_ref[None, :])``.

    Shared by the forward solver and the backward pass so both see the
    same bits.
    """
    return np.exp(logK + f_ref[:, None] + g_ref[None, :])


# fraction of the plain update's dual gain a relaxed update must keep
_GAIN_FRACTION = 0.05
_BACKTRACK = 6


def _dual_gain(delta, weights, w):
    # gain of the dual objective when the potentials move by w * delta, where
    # delta is the plain update; marginals before the move are weights * exp(-delta)
    with np.errstate(over="ignore", invalid="ignore"):
        terms = w * delta - np.exp(-delta) * np.expm1(w * delta)
    return float(np.dot(weights, terms))


def relaxation_weight(delta, weights, omega):
    """Largest weight on the ladder ``1 + (omega - 1) / 2**k`` with enough dual gain.

    ``delta`` is the plain (unrelaxed) potential update and ``weights`` the
    target marginal of that side. Returns 1 when no rung qualifies.
    """
    plain = _dual_gain(delta, weights, 1.0)
    if not plain > 0.0:
        return 1.0
    w = omega
    for _ in range(_BACKTRACK):
        gain = _dual_gain(delta, weights, w)
        if np.isfinite(gain) and gain >= _GAIN_FRACTION * plain:
            return w
        w = 1.0 + 0.5 * (w - 1.0)
    return 1.0


class SinkhornEngine:
    """Alternating log-domain scaling updates with kernel re-absorption.

    One call to :meth:`step` performs the row update of ``f`` followed by the
    column update of ``g``. With ``relaxation`` different from 1 every update
    after the first iteration is over-relaxed,
    ``f <- (1 - w) f + w * f_sinkhorn``; the fixed point is unchanged.
    Weights above 1 are safeguarded: ``w`` is backtracked towards 1 until the
    dual objective gains at least a fixed fraction of what the plain update
    would gain, which keeps the iteration monotone. The choice is made from a
    discrete ladder, so it is locally constant in the cost.

    When ``record`` is a list, each half-step appends
    ``(kind, ref_id, e, s, w)`` where ``e`` is the exponentiated input
    drift, ``s`` the scaling sum and ``w`` the weight applied; references are
    stored in ``self.refs``.
    """

    def __init__(self, logK, log_a, log_b, relaxation=1.0, f0=None, g0=None):
        self.logK = logK
        self.log_a = log_a
        self.log_b = log_b
        self.omega = float(relaxation)
        self.a, self.b = np.exp(log_a), np.exp(log_b)
        n, m = logK.shape
        self.f = np.zeros(n) if f0 is None else np.array(f0, dtype=float)
        self.g = np.zeros(m) if g0 is None else np.array(g0, dtype=float)
        self.t = 0
        self.f_ref = None
        self.g_ref = None
        self.M = None
        self.ref_id = -1
        self.refs = {}

    # snapshots let the backward pass recompute a segment bit-for-bit
    def snapshot(self):
        return (self.f.copy(), self.g.copy(), self.t,
                None if self.f_ref is None else self.f_ref.copy(),
                None if self.g_ref is None else self.g_ref.copy(),
                self.ref_id)

    def restore(self, snap):
        f, g, t, f_ref, g_ref, ref_id = snap
        self.f, self.g, self.t = f.copy(), g.copy(), t
        self.ref_id = ref_id
        if f_ref is None:
            self.f_ref = self.g_ref = self.M = None
        else:
            self.f_ref, self.g_ref = f_ref.copy(), g_ref.copy()
            self.M = stabilized_kernel(self.logK, self.f_ref, self.g_ref)
            self.refs[ref_id] = (self.f_ref, self.g_ref)

    def _set_ref(self, f_ref, g_ref):
        self.f_ref, self.g_ref = f_ref, g_ref
        self.M = stabilized_kernel(self.logK, f_ref, g_ref)
        self.ref_id += 1
        self.refs[self.ref_id] = (f_ref, g_ref)

    def _absorb_rows(self):
        g_ref = self.g.copy()
        f_ref = -np.max(self.logK + g_ref[None, :], axis=1)
        self._set_ref(f_ref, g_ref)

    def _absorb_cols(self):
        f_ref = self.f.copy()
        g_ref = -np.max(self.logK + f_ref[:, None], axis=0)
        self._set_ref(f_ref, g_ref)

    def _scaling_sum(self, side):
        # side 'f': rows against g; side 'g': columns against f
        if side == "f":
            drift = None if self.M is None else self.g - self.g_ref
            absorb, mat = self._absorb_rows, lambda: self.M
        else:
            drift = None if self.M is None else self.f - self.f_ref
            absorb, mat = self._absorb_cols, lambda: self.M.T
        if drift is None or np.max(np.abs(drift)) > _DRIFT:
            absorb()
            e = np.ones(mat().shape[1])
        else:
            e = np.exp(drift)
        s = mat() @ e
        if not (np.all(s > _TINY) and np.all(np.isfinite(s))):
            absorb()
            e = np.ones(mat().shape[1])
            s = mat() @ e
        return e, s

    def _weight(self, delta, weights):
        if self.t == 0:
            return 1.0
        if self.omega <= 1.0:
            return self.omega
        return relaxation_weight(delta, weights, self.omega)

    def step(self, record=None):
        e, s = self._scaling_sum("f")
        f_new = self.log_a + self.f_ref - np.log(s)
        w = self._weight(f_new - self.f, self.a)
        self.f = f_new if w == 1.0 else (1.0 - w) * self.f + w * f_new
        if record is not None:
            record.append(("f", self.ref_id, e, s, w))
        e, s = self._scaling_sum("g")
        g_new = self.log_b + self.g_ref - np.log(s)
        w = self._weight(g_new - self.g, self.b)
        self.g = g_new if w == 1.0 else (1.0 - w) * self.g + w * g_new
        if record is not None:
            record.append(("g", self.ref_id, e, s, w))
        self.t += 1

    def marginals(self):
        """Row and column sums of the current plan."""
        df, dg = self.f - self.f_ref, self.g - self.g_ref
        if max(np.max(np.abs(df)), np.max(np.abs(dg))) <= _DRIFT:
            ef, eg = np.exp(df), np.exp(dg)
            return ef * (self.M @ eg), eg * (self.M.T @ ef)
        P = self.plan()
        return P.sum(axis=1), P.sum(axis=0)

    def plan(self):
        return np.exp(self.logK + self.f[:, None] + self.g[None, :])


def marginal_deviation(gamma, a, b):
    """Max-norm deviation of row and column sums from the target weights."""
    return float(max(np.max(np.abs(gamma.sum(axis=1) - a)),
                     np.max(np.abs(gamma.sum(axis=0) - b))))


def _check_instance(problem, C, mask=None):
    n, m = problem.shape
    if C.shape != (n, m):
        raise InstanceError(f"cost matrix shape {C.shape} does not match problem shape {(n, m)}")
    if np.any(np.isnan(C)):
        raise InputError("cost matrix contains NaN")
    if not np.all(np.isfinite(C)):
        raise InputError("cost matrix contains Inf; forbid cells with a mask instead")
    if mask is not None and mask.shape != (n, m):
        raise InstanceError(f"mask shape {mask.shape} does not match problem shape {(n, m)}")


def log_kernel(problem, C, mask=None):
    """Shifted log-kernel ``-lam * (C - min C)`` with forbidden cells at ``-inf``.

    Returns ``(logK, shift)``. The global shift leaves the plan unchanged.
    """
    allowed = C if mask is None or not mask.any() else C[~mask]
    shift = float(allowed.min()) if allowed.size else 0.0
    logK = -problem.lam * (C - shift)
    if mask is not None and mask.any():
        logK = np.where(mask, -np.inf, logK)
    return logK, shift


def _run(eng, a, b, n_iter, tol, check_every):
    for t in range(n_iter):
        eng.step()
        if tol is not None and (t + 1) % check_every == 0:
            r, c = eng.marginals()
            if max(np.max(np.abs(r - a)), np.max(np.abs(c - b))) < tol:
                break


def solve(problem, cost, *, mask=None, tol=None, relaxation=1.0, check_every=10, anneal=False):
    """Shared driver behind `sinkhorn` and the masked solver.

    With ``anneal`` the problem is first solved at a small ``lam`` that is
    then doubled stage by stage up to ``problem.lam``, each stage warm-started
    from the previous potentials (at most ``sinkhorn_iters`` iterations per
    stage, early exit at ``tol``, default 1e-9). Plain scaling can need
    millions of iterations at large ``lam`` when the optimal plan sits near
    the boundary of the polytope; annealing avoids that. Not for paths that
    are differentiated.
    """
    C = as_cost_values(cost)
    mask = None if mask is None else np.asarray(mask, dtype=bool)
    _check_instance(problem, C, mask)
    a, b = problem.source.weights, problem.target.weights
    lam = problem.lam
    logK, shift = log_kernel(problem, C, mask)
    if anneal:
        tol = 1e-9 if tol is None else tol
        spread = float(np.max(-logK[np.isfinite(logK)])) / lam if np.isfinite(logK).any() else 0.0
        stages = [lam]
        while stages[-1] * spread > _ANNEAL_START and stages[-1] > lam * 1e-6:
            stages.append(stages[-1] / 2.0)
        f = g = None
        total = 0
        prev = None
        for lam_k in reversed(stages):
            if prev is not None:
                f, g = f * (lam_k / prev), g * (lam_k / prev)
            eng = SinkhornEngine(logK * (lam_k / lam), np.log(a), np.log(b), relaxation, f, g)
            _run(eng, a, b, problem.sinkhorn_iters, tol, check_every)
            f, g, prev = eng.f, eng.g, lam_k
            total += eng.t
    else:
        eng = SinkhornEngine(logK, np.log(a), np.log(b), relaxation=relaxation)
        _run(eng, a, b, problem.sinkhorn_iters, tol, check_every)
        total = eng.t
    gamma = eng.plan()
    err = marginal_deviation(gamma, a, b)
    return TransportPlan(
        gamma=gamma,
        dual_u=eng.f / lam + shift,
        dual_v=eng.g / lam,
        converged=bool(err < (CONVERGED_TOL if tol is None else tol)),
        marginal_error=err,
        n_iter=total,
    )


def sinkhorn(problem, cost, *, tol=None, relaxation=1.0):
    """Entropic OT plan for `problem` under `cost`.

    Parameters
    ----------
    problem : AlignmentProblem
        Clouds, ``lam`` and the iteration count.
    cost : CostMatrix or array_like, shape (n_x, n_y)
    tol : float, optional
        Inference-only early stop: quit as soon as the max marginal
        deviation drops below ``tol`` (checked every 10 iterations).
        Without it exactly ``problem.sinkhorn_iters`` iterations run.
    relaxation : float, optional
        Over-relaxation factor in ``(0, 2)``. 1 is plain Sinkhorn-Knopp;
        values around 1.8 converge far faster at large ``lam``.

    Returns
    -------
    TransportPlan
    """
    if not 0 < relaxation < 2:
        raise InputError(f"relaxation must lie in (0, 2), got {relaxation}")
    return solve(problem, cost, tol=tol, relaxation=relaxation)


def entropy(plan):
    """``-sum(gamma * log(gamma))`` with ``0 log 0 = 0``."""
    G = _gamma_of(plan)
    if np.any(G < 0):
        raise InputError("plan has negative entries")
    nz = G[G > 0]
    return float(-np.sum(nz * np.log(nz)))


def transport_objective(plan, cost, lam):
    """Regularized primal objective ``<gamma, C> - h(gamma) / lam``."""
    G = _gamma_of(plan)
    C = as_cost_values(cost)
    if G.shape != C.shape:
        raise InstanceError(f"plan shape {G.shape} does not match cost shape {C.shape}")
    return float(np.sum(G * C) - entropy(G) / lam)


def dual_objective(u, v, cost, a, b, lam):
    """Entropic dual ``a.u + b.v - (1/lam) sum exp(-lam (C - u - v))``."""
    C = as_cost_values(cost)
    expo = -lam * (C - np.asarray(u)[:, None] - np.asarray(v)[None, :])
    return float(np.dot(a, u) + np.dot(b, v) - np.exp(expo).sum() / lam)
