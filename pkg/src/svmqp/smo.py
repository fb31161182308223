"""Two-coordinate descent baselines for the SVM dual QP.

Greedy SMO (gsmo) picks the working pair by scanning the projected
gradient: i maximizes the feasible descent component, j minimizes a
one-dimensional quadratic model of the pair step.  Random SMO (rsmo)
draws the pair uniformly.  Both maintain the gradient incrementally in
O(n) per step and use g - (g'z/n) z as the working reduced gradient,
refreshed from scratch every n iterations to bound drift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .qp_model import (
    InfeasibleIterateError,
    QpProblem,
    active_partition,
    default_eps_active,
    _kkt_from_gradient,
)

__all__ = ["SmoOptions", "SmoState", "SmoResult",
           "gsmo_select", "smo_step", "solve_gsmo", "solve_rsmo"]


@dataclass
class SmoOptions:
    max_iters: int | None = None  # defaults: 1000n greedy, 10000n random
    kkt_tol: float = 1e-10
    seed: int = 0
    q_check_period: int | None = None  # default n
    eps_active: float | None = None


@dataclass
class SmoState:
    x: np.ndarray
    g: np.ndarray
    g_tilde: np.ndarray
    q: float = 0.0
    iter: int = 0          # executed pair steps
    attempts: int = 0      # loop passes, the capped quantity
    q_check_period: int = 0
    eps_active: float = 0.0
    q_violation_count: int = 0
    feas_drift_max: float = 0.0
    box_violation_max: float = 0.0
    q_trace: list = field(default_factory=list)


@dataclass
class SmoResult:
    x: np.ndarray
    kkt: object
    state: SmoState
    status: str

    @property
    def q(self) -> float:
        return self.state.q

    @property
    def iterations(self) -> int:
        return self.state.attempts

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _init_state(p: QpProblem, opts: SmoOptions) -> SmoState:
    eps = opts.eps_active if opts.eps_active is not None else default_eps_active(p.C)
    x = np.zeros(p.n)
    g = -p.c.copy()
    gt = g - (float(g @ p.z) / p.n) * p.z
    period = opts.q_check_period if opts.q_check_period is not None else p.n
    return SmoState(x=x, g=g, g_tilde=gt, q=0.0,
                    q_check_period=max(1, period), eps_active=eps)


def _projected_step(st: SmoState, p: QpProblem) -> np.ndarray:
    s = -st.g_tilde
    lower = st.x <= st.eps_active
    s[lower] = np.maximum(0.0, s[lower])
    if p.has_upper_bound:
        upper = st.x >= (1.0 - st.eps_active) * p.C
        s[upper] = np.minimum(0.0, s[upper])
    return s


def _pair_step(p, hd, x, gt, i, j, s_i):
    """Clipped model-minimizing displacement of x_i for the pair (i, j).

    Returns (lam, model_value) or None when the sign filter rejects the
    pair or the model value is not a strict decrease.
    """
    z = p.z
    zz = z[i] * z[j]
    gdiff = gt[i] - zz * gt[j]
    if gt[i] * gdiff <= 0.0:
        return None
    D = max(hd[i] + hd[j] - 2.0 * zz * p.H[i, j], 1e-300)
    lam = -gdiff / D
    # x_j moves by -lam*zz: clip lam to the allowance of that move,
    # then to the allowance of x_i.
    allow_j = (p.C - x[j]) if lam * zz < 0.0 else x[j]
    lam = math.copysign(min(abs(lam), allow_j), lam)
    lam_i = (p.C - x[i]) if s_i > 0.0 else -x[i]
    lam = math.copysign(min(abs(lam), abs(lam_i)), lam)
    if not np.isfinite(lam):
        return None
    model = lam * gdiff + 0.5 * lam * lam * D
    if not model < 0.0:
        return None
    return lam, model


def gsmo_select(st: SmoState, p: QpProblem):
    """Greedy working pair: returns (i, j, lam) or None.

    i maximizes |projected step| (ties to the smallest index); j scans
    all partners passing the sign filter and minimizes the pair model,
    with the displacement clipped to both coordinate allowances.  None
    means no pair gives a strict decrease.
    """
    s = _projected_step(st, p)
    i = int(np.argmax(np.abs(s)))
    s_i = float(s[i])
    if s_i == 0.0:
        return None
    z = p.z
    gt = st.g_tilde
    hd = np.diagonal(p.H)
    zz = z[i] * z
    gdiff = gt[i] - zz * gt
    filt = gt[i] * gdiff > 0.0
    filt[i] = False
    if not np.any(filt):
        return None
    D = np.maximum(hd[i] + hd - 2.0 * zz * p.H[i], 1e-300)
    lam = -gdiff / D
    allow_j = np.where(lam * zz < 0.0, p.C - st.x, st.x)
    lam = np.sign(lam) * np.minimum(np.abs(lam), allow_j)
    lam_i = (p.C - st.x[i]) if s_i > 0.0 else -st.x[i]
    lam = np.sign(lam) * np.minimum(np.abs(lam), abs(lam_i))
    model = np.where(filt & np.isfinite(lam),
                     lam * gdiff + 0.5 * lam * lam * D, np.inf)
    j = int(np.argmin(model))
    if not model[j] < 0.0:
        return None
    return i, j, float(lam[j])


def smo_step(st: SmoState, p: QpProblem, i: int, j: int, lam: float) -> SmoState:
    """Apply the pair displacement and update x, g, g_tilde, q in O(n)."""
    z = p.z
    zz = z[i] * z[j]
    gt = st.g_tilde
    gdiff = float(gt[i] - zz * gt[j])
    D = float(p.H[i, i] + p.H[j, j] - 2.0 * zz * p.H[i, j])
    eps = st.eps_active
    xi = st.x[i] + lam
    xj = st.x[j] - lam * zz
    limit = p.C + eps if p.has_upper_bound else np.inf
    if xi < -eps or xj < -eps or xi > limit or xj > limit:
        raise InfeasibleIterateError(
            f"pair step leaves the box: x[{i}]={xi}, x[{j}]={xj}")
    st.x[i] = min(max(xi, 0.0), p.C)
    st.x[j] = min(max(xj, 0.0), p.C)
    if lam != 0.0:
        st.g += lam * (p.H[i] - zz * p.H[j])
        st.g_tilde = st.g - (float(st.g @ z) / p.n) * z
        st.q += lam * gdiff + 0.5 * lam * lam * D
    st.iter += 1
    return st


def _refresh(st: SmoState, p: QpProblem) -> None:
    st.g = p.H @ st.x - p.c
    st.g_tilde = st.g - (float(st.g @ p.z) / p.n) * p.z
    st.q = 0.5 * (float(st.x @ st.g) - float(p.c @ st.x))
    drift = abs(float(p.z @ st.x)) / max(1.0, float(np.abs(st.x).sum()))
    st.feas_drift_max = max(st.feas_drift_max, drift)
    box = max(0.0, float(-st.x.min()))
    if p.has_upper_bound:
        box = max(box, float(st.x.max() - p.C))
    st.box_violation_max = max(st.box_violation_max, box)


def _checkpoint(st: SmoState, p: QpProblem, last_q, last_iter):
    """Refresh from scratch, audit the strict decrease, report KKT."""
    _refresh(st, p)
    if st.iter > last_iter and st.q > last_q + 1e-12 * max(1.0, abs(last_q)):
        st.q_violation_count += 1
    st.q_trace.append(st.q)
    part = active_partition(st.x, p.C, st.eps_active)
    return _kkt_from_gradient(st.g, p.z, st.x, part)


def solve_gsmo(p: QpProblem, opts: SmoOptions | None = None) -> SmoResult:
    """Greedy SMO until KKT tolerance, stall, or the iteration cap."""
    opts = opts or SmoOptions()
    max_iters = opts.max_iters if opts.max_iters is not None else 1000 * p.n
    st = _init_state(p, opts)
    status = "max_iters"
    last_q, last_iter = st.q, st.iter
    kkt = None
    while st.attempts < max_iters:
        st.attempts += 1
        sel = gsmo_select(st, p)
        if sel is None:
            kkt = _checkpoint(st, p, last_q, last_iter)
            status = "converged" if kkt.rel_residual <= opts.kkt_tol else "stalled"
            break
        smo_step(st, p, *sel)
        if st.attempts % st.q_check_period == 0:
            kkt = _checkpoint(st, p, last_q, last_iter)
            last_q, last_iter = st.q, st.iter
            if kkt.rel_residual <= opts.kkt_tol:
                status = "converged"
                break
    if kkt is None or st.attempts % st.q_check_period != 0:
        kkt = _checkpoint(st, p, last_q, last_iter)
    return SmoResult(x=st.x, kkt=kkt, state=st, status=status)


def solve_rsmo(p: QpProblem, opts: SmoOptions | None = None) -> SmoResult:
    """SMO with uniformly random pairs; same step and stopping rules."""
    opts = opts or SmoOptions()
    max_iters = opts.max_iters if opts.max_iters is not None else 10000 * p.n
    rng = np.random.default_rng(opts.seed)
    st = _init_state(p, opts)
    n = p.n
    hd = np.diagonal(p.H)
    eps = st.eps_active
    C = p.C
    finite_C = p.has_upper_bound
    status = "max_iters"
    last_q, last_iter = st.q, st.iter
    kkt = None
    batch = max(1, min(8192, max_iters))
    pairs = np.empty((0, 2), dtype=np.int64)
    pos = 0
    while st.attempts < max_iters:
        if pos >= pairs.shape[0]:
            pairs = rng.integers(0, [n, n - 1], size=(batch, 2))
            pos = 0
        i = int(pairs[pos, 0])
        j = (i + 1 + int(pairs[pos, 1])) % n
        pos += 1
        st.attempts += 1
        do_check = st.attempts % st.q_check_period == 0
        gt_i = float(st.g_tilde[i])
        x_i = float(st.x[i])
        if x_i <= eps:
            s_i = max(0.0, -gt_i)
        elif finite_C and x_i >= (1.0 - eps) * C:
            s_i = min(0.0, -gt_i)
        else:
            s_i = -gt_i
        if s_i != 0.0:
            step = _pair_step(p, hd, st.x, st.g_tilde, i, j, s_i)
            if step is not None:
                smo_step(st, p, i, j, step[0])
        if do_check:
            kkt = _checkpoint(st, p, last_q, last_iter)
            last_q, last_iter = st.q, st.iter
            if kkt.rel_residual <= opts.kkt_tol:
                status = "converged"
                break
    if kkt is None or st.attempts % st.q_check_period != 0:
        kkt = _checkpoint(st, p, last_q, last_iter)
    return SmoResult(x=st.x, kkt=kkt, state=st, status=status)
