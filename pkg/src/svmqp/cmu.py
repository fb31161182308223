"""Cycling active-set solver with factor updates (the "cmu" solver).

The solver alternates two phases on the feasible set of the SVM dual
QP.  A Newton sweep minimizes over the currently inactive variables,
pinning them to bounds one at a time while downdating the Cholesky
factor of the inactive Hessian block.  An up-cycle then releases active
variables again through cheap first-order steps that need no
factorization at all.  One factorization per sweep; everything else is
O(n^2) or less.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dense_linalg import (
    CholFactor,
    NotPositiveDefiniteError,
    cholesky,
    delete_index,
    solve_with_refinement,
)
from .qp_model import (
    ActivePartition,
    QpProblem,
    active_partition,
    default_eps_active,
    gradient,
    kkt_report,
    multiplier_mu,
    objective,
    project_nullspace,
    project_tangent_cone,
    _kkt_from_gradient,
)

__all__ = [
    "CmuOptions",
    "SolverState",
    "UpCycleStep",
    "CmuResult",
    "reduced_direction",
    "upcycle_direction",
    "line_search",
    "up_cycle",
    "starting_point",
    "newton_sweep",
    "solve_cmu",
]


@dataclass
class CmuOptions:
    """Tuning knobs of the cycling solver.

    reg is a relative regularization: the sweep adds
    reg * mean(diag(H_KK)) * I before factoring.  kkt_tol is compared
    against the scaled KKT residual.
    """

    eps_active: float | None = None
    kkt_tol: float = 1e-10
    inactive_cap: int = 2000
    reg: float = 1e-12
    refine_steps: int = 2
    max_cycles: int = 100
    descent_tol: float = 1e-14

    def resolved_eps(self, C: float) -> float:
        return self.eps_active if self.eps_active is not None else default_eps_active(C)


@dataclass
class UpCycleStep:
    """One candidate direction of the up-cycle.

    kind is "case1" (two index sets released), "case2" (single pair) or
    "fail".  indices holds (I, J) for case1 and (i, j) for case2.
    """

    kind: str
    s: np.ndarray
    indices: tuple


@dataclass
class SolverState:
    """Mutable state of one solve, plus cheap invariant diagnostics."""

    x: np.ndarray
    g: np.ndarray
    part: ActivePartition
    factor: CholFactor | None = None
    q: float = 0.0
    cycles: int = 0
    inner_iterations: int = 0
    q_trace: list = field(default_factory=list)
    status: str = "running"
    upcycle_steps: int = 0
    newton_steps: int = 0
    q_increase_count: int = 0
    dir_violation_count: int = 0
    feas_drift_max: float = 0.0
    box_violation_max: float = 0.0
    extra_factorizations: int = 0

    def observe(self, p: QpProblem, q_prev: float) -> None:
        drift = abs(float(p.z @ self.x)) / max(1.0, float(np.abs(self.x).sum()))
        self.feas_drift_max = max(self.feas_drift_max, drift)
        box = max(0.0, float(-self.x.min()))
        if p.has_upper_bound:
            box = max(box, float(self.x.max() - p.C))
        self.box_violation_max = max(self.box_violation_max, box)
        if self.q > q_prev + 1e-12 * max(1.0, abs(q_prev)):
            self.q_increase_count += 1
        self.q_trace.append(self.q)


@dataclass
class CmuResult:
    x: np.ndarray
    kkt: object
    state: SolverState

    @property
    def q(self) -> float:
        return self.state.q

    @property
    def converged(self) -> bool:
        return self.state.status in ("optimal", "converged")


def reduced_direction(p: QpProblem, x, part: ActivePartition):
    """Reduced gradient and its projection onto the feasible cone.

    Returns (g - mu*z, s) with s the tangent-cone projection of the
    negated reduced gradient; s = 0 exactly at optimal points.
    """
    g = gradient(p, x)
    return _reduced_from_gradient(p, x, g, part)


def _reduced_from_gradient(p: QpProblem, x, g, part: ActivePartition):
    mu = multiplier_mu(g, p.z, part)
    gt = g - mu * p.z
    st = project_tangent_cone(x, -gt, p.C, part.eps_active)
    return gt, st


def upcycle_direction(x, g_tilde, s_tilde, z, part: ActivePartition) -> UpCycleStep:
    """Build a feasible descent direction that releases active variables.

    With I and J the active indices whose release raises/lowers z's,
    case 1 pairs the two sets against each other; case 2 pairs the
    single best active index with the best partner of compatible sign;
    everything else fails (which at the first attempt after a sweep
    certifies optimality).
    """
    n = x.shape[0]
    A = part.A
    zs = z[A] * s_tilde[A]
    I = A[zs > 0.0]
    J = A[zs < 0.0]
    if I.size > 0 and J.size > 0:
        v1 = float(z[I] @ s_tilde[I])
        v2 = float(z[J] @ s_tilde[J])
        s = np.zeros(n)
        s[I] = -v2 * s_tilde[I]
        s[J] = v1 * s_tilde[J]
        return UpCycleStep(kind="case1", s=s, indices=(I, J))
    if I.size == 0 and J.size == 0:
        return UpCycleStep(kind="fail", s=np.zeros(n), indices=())
    i = A[int(np.argmax(np.abs(s_tilde[A])))]
    sgn = math.copysign(1.0, s_tilde[i])
    compatible = part.sigma[i] * part.sigma * z[i] * z <= 0.0
    vals = np.where(compatible, sgn * z[i] * z * g_tilde, -np.inf)
    j = int(np.argmax(vals))
    s = np.zeros(n)
    s[i] = sgn
    s[j] -= sgn * z[i] * z[j]
    if float(vals[j]) <= -abs(g_tilde[i]):
        return UpCycleStep(kind="fail", s=np.zeros(n), indices=(int(i), j))
    return UpCycleStep(kind="case2", s=s, indices=(int(i), j))


def line_search(p: QpProblem, x, s):
    """Exact minimizing step along a feasible descent direction.

    Returns (lam, x_plus, hit_bound) with lam the minimum of the
    unconstrained step g's / s'Hs and the largest box-feasible step.
    """
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    g = gradient(p, x)
    Hs = p.H @ s
    return _line_search_core(p, x, s, float(g @ s), Hs, float(s @ Hs))


def _line_search_core(p: QpProblem, x, s, gs, Hs, sHs):
    if sHs <= 0.0:
        raise np.linalg.LinAlgError(
            "s'Hs <= 0 along the search direction; H is not positive definite")
    lam_hat = -gs / sHs
    lam_max = _max_feasible_step(p, x, s)
    lam = max(0.0, min(lam_hat, lam_max))
    hit = lam_max <= lam_hat
    x_plus = x + lam * s
    if hit:
        _snap_blockers(p, x_plus, s, x, lam_max)
    np.clip(x_plus, 0.0, p.C, out=x_plus)
    return lam, x_plus, hit


def _max_feasible_step(p: QpProblem, x, s) -> float:
    lam = np.inf
    neg = s < 0.0
    if np.any(neg):
        lam = float(np.min(-x[neg] / s[neg]))
    if p.has_upper_bound:
        pos = s > 0.0
        if np.any(pos):
            lam = min(lam, float(np.min((p.C - x[pos]) / s[pos])))
    return max(lam, 0.0)


def _snap_blockers(p: QpProblem, x_plus, s, x_old, lam_max) -> None:
    # Land the blocking coordinates exactly on their bounds so the
    # active-set bookkeeping sees them.
    neg = np.nonzero(s < 0.0)[0]
    if neg.size:
        ratios = -x_old[neg] / s[neg]
        x_plus[neg[ratios <= lam_max * (1.0 + 1e-12)]] = 0.0
    if p.has_upper_bound:
        pos = np.nonzero(s > 0.0)[0]
        if pos.size:
            ratios = (p.C - x_old[pos]) / s[pos]
            x_plus[pos[ratios <= lam_max * (1.0 + 1e-12)]] = p.C


def _check_direction(p: QpProblem, part: ActivePartition, s, gs) -> bool:
    zs = abs(float(p.z @ s))
    ok = zs <= 1e-12 * max(1.0, float(np.abs(s).sum()))
    ok = ok and bool(np.all(part.sigma * s >= -1e-14 * np.abs(s).max()))
    ok = ok and gs < 0.0
    return ok


def up_cycle(p: QpProblem, st: SolverState, opts: CmuOptions) -> SolverState:
    """Release active variables by first-order steps until a cap hits.

    Stops on direction failure (flagging the state optimal when that
    happens at the very first attempt), after n steps, or once the
    inactive set has grown by 50% over its entry size (with a floor of
    100 inactive indices).
    """
    eps = opts.resolved_eps(p.C)
    n = p.n
    k_entry = st.part.K.size
    max_inactive = min(n, max(100, math.ceil(3 * k_entry / 2)))
    steps = 0
    while True:
        gt, s_tilde = _reduced_from_gradient(p, st.x, st.g, st.part)
        step = upcycle_direction(st.x, gt, s_tilde, p.z, st.part)
        if step.kind == "fail":
            if steps == 0:
                st.status = "optimal"
            return st
        s = step.s
        supp = np.nonzero(s)[0]
        Hs = p.H[:, supp] @ s[supp]
        gs = float(st.g[supp] @ s[supp])
        sHs = float(s[supp] @ Hs[supp])
        gnorm = float(np.linalg.norm(gt))
        snorm = float(np.linalg.norm(s))
        if not (gs < -opts.descent_tol * gnorm * snorm) or sHs <= 0.0:
            if steps == 0:
                st.status = "optimal"
            return st
        if not _check_direction(p, st.part, s, gs):
            st.dir_violation_count += 1
        q_prev = st.q
        lam, x_plus, _hit = _line_search_core(p, st.x, s, gs, Hs, sHs)
        st.x = x_plus
        st.g = st.g + lam * Hs
        st.q = q_prev + lam * gs + 0.5 * lam * lam * sHs
        st.part = active_partition(st.x, p.C, eps)
        st.inner_iterations += 1
        st.upcycle_steps += 1
        steps += 1
        st.observe(p, q_prev)
        if steps >= n or st.part.K.size >= max_inactive:
            return st


def starting_point(p: QpProblem, opts: CmuOptions | None = None) -> np.ndarray:
    """Feasible point with a controlled number of inactive variables.

    Projects c onto the equality nullspace, line-searches from 0 along
    it, and when that releases more variables than the inactive cap
    allows, repeats the search restricted to the most promising
    coordinates.
    """
    opts = opts or CmuOptions()
    n = p.n
    zero = np.zeros(n)
    s = project_nullspace(p.z, p.c)
    if s.min() <= 0.0:
        s = _balance_nonnegative(np.maximum(s, 0.0), p.z)
    if not np.any(s > 0.0) or float(p.c @ s) <= 0.0:
        return zero
    lam, x, hit = line_search(p, zero, s)
    if hit or n <= opts.inactive_cap:
        return x
    g = gradient(p, x)
    score = x - project_nullspace(p.z, g)
    promising = np.sort(np.argpartition(score, n - opts.inactive_cap)[-opts.inactive_cap:])
    v = np.zeros(n)
    zp = p.z[promising]
    vp = x[promising]
    vp = vp - (float(zp @ vp) / promising.size) * zp
    if vp.min() < 0.0:
        vp = _balance_nonnegative(np.maximum(vp, 0.0), zp)
    v[promising] = vp
    if not np.any(v > 0.0) or float(p.c @ v) <= 0.0:
        return x
    _, x_restricted, _ = line_search(p, zero, v)
    return x_restricted


def _balance_nonnegative(s, z):
    # Rescale the two label groups of a nonnegative vector so z's = 0
    # holds again after clipping.
    pos = z > 0.0
    a = float(s[pos].sum())
    b = float(s[~pos].sum())
    if a <= 0.0 or b <= 0.0:
        return np.zeros_like(s)
    out = s.copy()
    out[pos] *= min(1.0, b / a)
    out[~pos] *= min(1.0, a / b)
    return out


def newton_sweep(p: QpProblem, st: SolverState, opts: CmuOptions) -> SolverState:
    """Minimize over the inactive set, activating blockers one by one.

    Factors the inactive Hessian block once (regularized, with
    iterative refinement against the original block on every solve),
    then repeats equality-constrained Newton steps.  Each step that
    hits a bound moves exactly one index - the smallest blocker - to
    the active set and downdates the factor.
    """
    eps = opts.resolved_eps(p.C)
    st.g = gradient(p, st.x)
    st.q = objective(p, st.x)
    st.part = active_partition(st.x, p.C, eps)
    K = st.part.K.copy()
    if K.size == 0:
        st.factor = None
        return st
    M = p.H[np.ix_(K, K)]
    st.factor = _factor_with_retry(M, K, opts, st)
    st.cycles += 1
    guard = K.size + 2
    for _ in range(guard):
        K = st.factor.index_map
        m = K.size
        if m == 0:
            break
        B = np.column_stack((-st.g[K], p.z[K]))
        X = solve_with_refinement(st.factor, M, B, opts.refine_steps)
        u, v = X[:, 0], X[:, 1]
        zv = float(p.z[K] @ v)
        if zv <= 0.0:
            raise np.linalg.LinAlgError(
                "z'v <= 0 in the Newton system; H_KK is not positive definite")
        eta = float(p.z[K] @ u) / zv
        dx = u - eta * v
        t_max, blocker = _sweep_step_bound(p, st.x, K, dx)
        t = min(1.0, t_max)
        q_prev = st.q
        if t > 0.0:
            dx_full = np.zeros(p.n)
            dx_full[K] = dx
            st.x = st.x + t * dx_full
            Hdx = p.H @ dx_full
            gs = float(st.g @ dx_full)
            st.q = q_prev + t * gs + 0.5 * t * t * float(dx_full @ Hdx)
            st.g = st.g + t * Hdx
        st.inner_iterations += 1
        st.newton_steps += 1
        if t_max >= 1.0:
            np.clip(st.x, 0.0, p.C, out=st.x)
            st.observe(p, q_prev)
            break
        # A bound blocks the step: pin that index and shrink the factor.
        local = st.factor.local_index(blocker)
        st.x[blocker] = 0.0 if dx[local] < 0.0 else p.C
        np.clip(st.x, 0.0, p.C, out=st.x)
        st.observe(p, q_prev)
        st.factor = delete_index(st.factor, local)
        M = np.delete(np.delete(M, local, axis=0), local, axis=1)
    st.part = active_partition(st.x, p.C, eps)
    return st


def _factor_with_retry(M, K, opts: CmuOptions, st: SolverState) -> CholFactor:
    mean_diag = float(np.trace(M)) / K.size
    reg = opts.reg * mean_diag
    for attempt in range(3):
        try:
            return cholesky(M + reg * np.eye(K.size), index_map=K)
        except NotPositiveDefiniteError:
            if attempt == 2:
                raise
            reg = max(reg, 1e-16 * mean_diag) * 1000.0
            st.extra_factorizations += 1
    raise AssertionError("unreachable")


def _sweep_step_bound(p: QpProblem, x, K, dx):
    """Largest feasible multiple of dx on K and the smallest blocker."""
    idx_parts = []
    ratio_parts = []
    neg = dx < 0.0
    if np.any(neg):
        idx_parts.append(K[neg])
        ratio_parts.append(-x[K[neg]] / dx[neg])
    if p.has_upper_bound:
        pos = dx > 0.0
        if np.any(pos):
            idx_parts.append(K[pos])
            ratio_parts.append((p.C - x[K[pos]]) / dx[pos])
    if not idx_parts:
        return np.inf, -1
    idx = np.concatenate(idx_parts)
    ratios = np.maximum(np.concatenate(ratio_parts), 0.0)
    t_max = float(ratios.min())
    blockers = idx[ratios <= t_max * (1.0 + 1e-12)]
    return t_max, int(blockers.min())


def solve_cmu(p: QpProblem, opts: CmuOptions | None = None) -> CmuResult:
    """Run the full cycling solve.

    Starts from the projected-linear-term point, then repeats Newton
    sweep + up-cycle until the up-cycle certifies optimality, the
    scaled KKT residual drops below kkt_tol, or max_cycles runs out.
    """
    opts = opts or CmuOptions()
    eps = opts.resolved_eps(p.C)
    x0 = starting_point(p, opts)
    st = SolverState(
        x=x0,
        g=gradient(p, x0),
        part=active_partition(x0, p.C, eps),
        q=objective(p, x0),
    )
    st.q_trace.append(st.q)
    for _ in range(opts.max_cycles):
        newton_sweep(p, st, opts)
        rep = _kkt_from_gradient(st.g, p.z, st.x, st.part)
        if rep.rel_residual <= opts.kkt_tol:
            st.status = "converged"
            break
        before = st.upcycle_steps
        up_cycle(p, st, opts)
        if st.status == "optimal":
            break
        if st.upcycle_steps == before:
            raise RuntimeError("up-cycle made no progress without failing")
    else:
        st.status = "max_cycles"
    final = kkt_report(p, st.x, eps)
    st.q = objective(p, st.x)
    return CmuResult(x=st.x, kkt=final, state=st)
