"""Dense SPD factorization engine.

Cholesky factorization plus the two cheap O(m^2) operations the
active-set solver lives on: a stable additive rank-one update of the
factor, and deletion of a row/column realized as a rank-one update of
the trailing block (the leading blocks of the factor are reused, never
recomputed).  Also provides triangular solves and regularized solves
with iterative refinement against the unregularized matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular
from scipy.linalg.lapack import dpotrf

__all__ = [
    "CholFactor",
    "NotPositiveDefiniteError",
    "cholesky",
    "rank_one_update",
    "delete_index",
    "solve_spd",
    "solve_with_refinement",
    "refined_solve",
]


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """Cholesky pivot failure; ``pivot`` is the 0-based failing index."""

    def __init__(self, pivot: int):
        self.pivot = int(pivot)
        super().__init__(f"matrix is not positive definite (pivot {pivot})")


@dataclass
class CholFactor:
    """Lower-triangular factor L with L L' equal to the factored matrix.

    index_map records which original problem index each factor row
    refers to, so deletions can be addressed either way.
    """

    L: np.ndarray
    index_map: np.ndarray

    @property
    def dim(self) -> int:
        return self.L.shape[0]

    def local_index(self, original: int) -> int:
        pos = np.nonzero(self.index_map == original)[0]
        if pos.size == 0:
            raise KeyError(f"index {original} is not in the factor")
        return int(pos[0])


def cholesky(M: np.ndarray, index_map=None) -> CholFactor:
    """Factor a symmetric positive definite matrix as L L'.

    Raises NotPositiveDefiniteError carrying the failing pivot when M
    is not numerically positive definite.
    """
    M = np.asarray(M, dtype=float)
    m = M.shape[0]
    if M.shape != (m, m):
        raise ValueError("M must be square")
    if m and np.abs(M - M.T).max() > 1e-10 * max(1.0, np.abs(M).max()):
        raise ValueError("M must be symmetric")
    if index_map is None:
        index_map = np.arange(m)
    index_map = np.asarray(index_map, dtype=int)
    if index_map.shape != (m,) or np.unique(index_map).size != m:
        raise ValueError("index_map must list each factor row once")
    if m == 0:
        return CholFactor(L=np.zeros((0, 0)), index_map=index_map)
    L, info = dpotrf(M, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:
        raise ValueError(f"illegal value in argument {-info} of dpotrf")
    return CholFactor(L=L, index_map=index_map)


def _rank_one_update_inplace(L: np.ndarray, w: np.ndarray) -> None:
    # Classic positive update: L L' + w w' via sequential Givens-like
    # eliminations.  Stable because only additions occur under the root.
    m = L.shape[0]
    for k in range(m):
        lkk = L[k, k]
        r = np.hypot(lkk, w[k])
        cos = r / lkk
        sin = w[k] / lkk
        L[k, k] = r
        if k + 1 < m:
            col = L[k + 1:, k]
            col += sin * w[k + 1:]
            col /= cos
            w[k + 1:] = cos * w[k + 1:] - sin * col


def rank_one_update(F: CholFactor, w: np.ndarray) -> CholFactor:
    """Factor of L L' + w w' (additive update only), O(m^2)."""
    w = np.asarray(w, dtype=float)
    if w.shape != (F.dim,):
        raise ValueError(f"w must have length {F.dim}")
    L = F.L.copy()
    _rank_one_update_inplace(L, w.copy())
    return CholFactor(L=L, index_map=F.index_map.copy())


def delete_index(F: CholFactor, k: int) -> CholFactor:
    """Factor of the matrix with (local) row/column k removed.

    Keeps the leading blocks of L untouched and applies a rank-one
    update with the deleted column to the trailing block; O((dim-k)^2)
    arithmetic.
    """
    m = F.dim
    if not 0 <= k < m:
        raise IndexError(f"k must be in [0, {m}), got {k}")
    L = np.zeros((m - 1, m - 1))
    L[:k, :k] = F.L[:k, :k]
    L[k:, :k] = F.L[k + 1:, :k]
    L[k:, k:] = np.tril(F.L[k + 1:, k + 1:])
    _rank_one_update_inplace(L[k:, k:], F.L[k + 1:, k].copy())
    return CholFactor(L=L, index_map=np.delete(F.index_map, k))


def solve_spd(F: CholFactor, B: np.ndarray) -> np.ndarray:
    """Solve (L L') X = B by forward then backward substitution."""
    B = np.asarray(B, dtype=float)
    if B.shape[0] != F.dim:
        raise ValueError(f"B must have {F.dim} rows")
    if F.dim == 0:
        return B.copy()
    Y = solve_triangular(F.L, B, lower=True)
    return solve_triangular(F.L, Y, lower=True, trans="T")


def solve_with_refinement(F: CholFactor, M: np.ndarray, B: np.ndarray,
                          refine_steps: int) -> np.ndarray:
    """Solve M X = B using the factor F of a (regularized) version of M.

    Each refinement step computes the residual with the original M and
    corrects through F.
    """
    X = solve_spd(F, B)
    for _ in range(refine_steps):
        R = B - M @ X
        X = X + solve_spd(F, R)
    return X


def refined_solve(M: np.ndarray, reg: float | None, B: np.ndarray,
                  refine_steps: int = 2) -> tuple[np.ndarray, float]:
    """Factor M + reg*I, solve, then refine against the original M.

    reg=None picks 1e-12 * mean(diag(M)).  Returns the solution and the
    Frobenius norm of the final residual B - M X.
    """
    M = np.asarray(M, dtype=float)
    B = np.asarray(B, dtype=float)
    m = M.shape[0]
    if refine_steps < 0:
        raise ValueError("refine_steps must be >= 0")
    if reg is None:
        reg = 1e-12 * (float(np.trace(M)) / m if m else 1.0)
    Mreg = M if reg == 0.0 else M + reg * np.eye(m)
    F = cholesky(Mreg)
    X = solve_with_refinement(F, M, B, refine_steps)
    resid = float(np.linalg.norm(B - M @ X))
    return X, resid
