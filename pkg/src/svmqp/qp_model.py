"""Convex QP model for kernel-SVM dual training.

The problem is

    min  0.5 * x'Hx - c'x    s.t.  z'x = 0,  0 <= x <= C,

with H symmetric positive definite, z a vector of +-1 labels and C a
positive bound (np.inf selects the hard-margin case, in which the upper
bound simply does not exist).  This module holds the problem data,
objective/gradient evaluation, the two projections used by the solvers,
active-set bookkeeping and the first-order optimality test.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "QpProblem",
    "ActivePartition",
    "KktReport",
    "InfeasibleIterateError",
    "default_eps_active",
    "objective",
    "gradient",
    "project_nullspace",
    "project_tangent_cone",
    "active_partition",
    "multiplier_mu",
    "kkt_report",
    "feasibility_violation",
]


class InfeasibleIterateError(RuntimeError):
    """Raised when an iterate violates structure that every feasible point has."""


def default_eps_active(C: float) -> float:
    """Default absolute tolerance deciding bound activity.

    Scales with C when C is finite; for the hard-margin case (C = inf)
    a plain 1e-9 is used.
    """
    c_finite = C if np.isfinite(C) else 1.0
    return 1e-9 * max(1.0, c_finite)


@dataclass
class QpProblem:
    """Data of one QP instance.

    Parameters
    ----------
    H : (n, n) ndarray
        Symmetric positive definite quadratic term (the dual Hessian).
    c : (n,) ndarray
        Linear term; the all-ones vector for SVM training.
    z : (n,) ndarray
        Labels in {-1, +1}; must contain both signs (well-posedness).
    C : float
        Upper bound on the variables, > 0.  np.inf means no upper bound.
    """

    H: np.ndarray
    c: np.ndarray
    z: np.ndarray
    C: float
    n: int = field(init=False)

    def __post_init__(self):
        self.H = np.ascontiguousarray(self.H, dtype=float)
        self.c = np.asarray(self.c, dtype=float)
        self.z = np.asarray(self.z, dtype=float)
        n = self.c.shape[0]
        if self.H.shape != (n, n):
            raise ValueError(f"H must be {n}x{n}, got {self.H.shape}")
        if self.z.shape != (n,):
            raise ValueError("z must have the same length as c")
        if not np.all(np.abs(self.z) == 1.0):
            raise ValueError("labels must be +-1")
        if np.all(self.z == 1.0) or np.all(self.z == -1.0):
            raise ValueError("labels must contain both signs")
        scale = max(1.0, float(np.abs(self.H).max()))
        if np.abs(self.H - self.H.T).max() > 1e-12 * scale:
            raise ValueError("H must be symmetric")
        if np.any(np.diag(self.H) <= 0.0):
            raise ValueError("H must have a strictly positive diagonal")
        self.C = float(self.C)
        if not self.C > 0.0:
            raise ValueError("C must be positive")
        self.n = n

    @property
    def has_upper_bound(self) -> bool:
        return np.isfinite(self.C)


@dataclass
class ActivePartition:
    """Index bookkeeping at a feasible point.

    A holds the indices at a bound (within eps_active), K the remaining
    ones.  sigma is +1 on the lower-active set, -1 on the upper-active
    set and 0 on K.
    """

    A: np.ndarray
    K: np.ndarray
    sigma: np.ndarray
    eps_active: float


@dataclass
class KktReport:
    """Scaled first-order optimality measures at a feasible point."""

    mu: float
    grad_norm_K: float
    sign_violation: float
    rel_residual: float
    x_inf_norm: float


def objective(p: QpProblem, x: np.ndarray) -> float:
    """Evaluate 0.5 x'Hx - c'x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise ValueError(f"x must have length {p.n}")
    return 0.5 * float(x @ (p.H @ x)) - float(p.c @ x)


def gradient(p: QpProblem, x: np.ndarray) -> np.ndarray:
    """Evaluate Hx - c."""
    x = np.asarray(x, dtype=float)
    if x.shape != (p.n,):
        raise ValueError(f"x must have length {p.n}")
    return p.H @ x - p.c


def project_nullspace(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Orthogonal projection of y onto {x | z'x = 0} for z in {-1,+1}^n."""
    z = np.asarray(z, dtype=float)
    y = np.asarray(y, dtype=float)
    if z.shape != y.shape:
        raise ValueError("z and y must have the same length")
    return y - (float(z @ y) / z.shape[0]) * z


def project_tangent_cone(x, y, C, eps) -> np.ndarray:
    """Project y onto the tangent cone of the box [0, C]^n at x.

    Componentwise: max{0, y_i} where x_i is at the lower bound,
    min{0, y_i} where x_i is at the upper bound, y_i elsewhere.  Bound
    membership uses the tolerance eps: x_i <= eps counts as lower
    active, x_i >= (1 - eps) * C as upper active.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = y.copy()
    lower = x <= eps
    p[lower] = np.maximum(0.0, y[lower])
    if np.isfinite(C):
        upper = x >= (1.0 - eps) * C
        p[upper] = np.minimum(0.0, y[upper])
    return p


def active_partition(x, C, eps) -> ActivePartition:
    """Split indices into active (at a bound within eps) and inactive."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    sigma = np.zeros(n)
    lower = x <= eps
    sigma[lower] = 1.0
    if np.isfinite(C):
        upper = x >= (1.0 - eps) * C
        sigma[upper] = -1.0
    active = sigma != 0.0
    idx = np.arange(n)
    return ActivePartition(A=idx[active], K=idx[~active], sigma=sigma,
                           eps_active=float(eps))


def multiplier_mu(g: np.ndarray, z: np.ndarray, part: ActivePartition) -> float:
    """Equality multiplier estimate.

    Average of z_k g_k over the inactive set; when every index is
    active, the smallest sigma_i g_i over {i | sigma_i z_i = 1} (that
    set is nonempty at any feasible point).
    """
    K = part.K
    if K.size > 0:
        return float(g[K] @ z[K]) / K.size
    mask = part.sigma * z == 1.0
    if not np.any(mask):
        raise InfeasibleIterateError(
            "no index with sigma_i z_i = 1; iterate cannot be feasible")
    return float(np.min(part.sigma[mask] * g[mask]))


def kkt_report(p: QpProblem, x: np.ndarray, eps: float | None = None) -> KktReport:
    """First-order optimality measures at a feasible x.

    Builds g, mu and the reduced gradient g - mu*z, then reports the
    norm of its inactive part, the worst sign violation on the active
    part, and the combined measure scaled by max(1, ||x||_inf).
    """
    if eps is None:
        eps = default_eps_active(p.C)
    g = gradient(p, x)
    part = active_partition(x, p.C, eps)
    return _kkt_from_gradient(g, p.z, x, part)


def _kkt_from_gradient(g, z, x, part: ActivePartition) -> KktReport:
    # Fast path for solvers that maintain g incrementally.
    mu = multiplier_mu(g, z, part)
    gt = g - mu * z
    grad_norm_K = float(np.linalg.norm(gt[part.K])) if part.K.size else 0.0
    sign_violation = max(0.0, -float(np.min(part.sigma * gt)))
    x_inf = float(np.abs(x).max()) if x.size else 0.0
    rel = max(grad_norm_K, sign_violation) / max(1.0, x_inf)
    return KktReport(mu=mu, grad_norm_K=grad_norm_K,
                     sign_violation=sign_violation, rel_residual=rel,
                     x_inf_norm=x_inf)


def feasibility_violation(p: QpProblem, x: np.ndarray) -> tuple[float, float]:
    """(relative |z'x| drift, worst box violation) of an iterate."""
    x = np.asarray(x, dtype=float)
    drift = abs(float(p.z @ x)) / max(1.0, float(np.abs(x).sum()))
    box = max(0.0, float(-x.min()))
    if p.has_upper_bound:
        box = max(box, float((x - p.C).max()))
    return drift, box
