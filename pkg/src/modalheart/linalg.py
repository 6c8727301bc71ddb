"""SVD, eigendecomposition and least squares with explicit accuracy contracts.

The factorizations call LAPACK through numpy. This module adds the
truncation rules, the deterministic sign convention and the error types
the decompositions rely on.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class NonFiniteInput(ValueError):
    pass


class EigNonConvergence(RuntimeError):
    pass


@dataclass(frozen=True)
class SvdFactors:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.sigma)

    def matrix(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.conj().T


@dataclass(frozen=True)
class TruncationRule:
    """Either keep ``rank`` leading triplets or those with sigma_k/sigma_0 > ``tol``."""

    rank: Optional[int] = None
    tol: Optional[float] = None

    def __post_init__(self):
        if (self.rank is None) == (self.tol is None):
            raise ValueError("give exactly one of rank or tol")
        if self.rank is not None and self.rank <= 0:
            raise ValueError("rank must be positive")
        if self.tol is not None and not self.tol > 0:
            raise ValueError("tolerance must be positive")

    def retained(self, sigma: np.ndarray) -> int:
        if self.rank is not None:
            return min(self.rank, len(sigma))
        return retained_by_tolerance(sigma, self.tol)


def rank_rule(r: int) -> TruncationRule:
    return TruncationRule(rank=r)


def tol_rule(eps: float) -> TruncationRule:
    return TruncationRule(tol=eps)


def retained_by_tolerance(sigma: np.ndarray, eps: float) -> int:
    if not eps > 0:
        raise ValueError("tolerance must be positive")
    if len(sigma) == 0 or sigma[0] <= 0:
        return min(1, len(sigma))
    return max(1, int(np.count_nonzero(sigma / sigma[0] > eps)))


def _fix_signs(U: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # largest-magnitude entry of each U column made positive (first index on ties)
    idx = np.argmax(np.abs(U), axis=0)
    pivots = U[idx, np.arange(U.shape[1])]
    if np.iscomplexobj(U):
        phase = np.where(np.abs(pivots) > 0, np.abs(pivots) / np.where(pivots == 0, 1, pivots), 1)
    else:
        phase = np.where(pivots < 0, -1.0, 1.0)
    return U * phase, V * phase


def svd(A: np.ndarray) -> SvdFactors:
    """Economy SVD with ``min(m, n)`` triplets and the sign convention applied."""
    A = np.asarray(A)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("svd input contains non-finite entries")
    if not np.iscomplexobj(A):
        A = A.astype(np.float64, copy=False)
    U, s, Vh = np.linalg.svd(A, full_matrices=False)
    U, V = _fix_signs(U, Vh.conj().T)
    return SvdFactors(U, s, V)


def truncate(f: SvdFactors, rule: TruncationRule) -> SvdFactors:
    k = rule.retained(f.sigma)
    return SvdFactors(f.U[:, :k], f.sigma[:k], f.V[:, :k])


def discarded_energy(f: SvdFactors, kept: int) -> float:
    """Frobenius norm of what truncation to ``kept`` triplets throws away."""
    return float(np.sqrt(np.sum(f.sigma[kept:] ** 2)))


@dataclass(frozen=True)
class EigPairs:
    values: np.ndarray
    vectors: np.ndarray


def eig(A: np.ndarray) -> EigPairs:
    A = np.asarray(A)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"eig needs a square matrix, got {A.shape}")
    if not np.all(np.isfinite(A)):
        raise NonFiniteInput("eig input contains non-finite entries")
    try:
        w, v = np.linalg.eig(A)
    except np.linalg.LinAlgError as exc:
        raise EigNonConvergence(str(exc)) from exc
    return EigPairs(w.astype(np.complex128), v.astype(np.complex128))


@dataclass(frozen=True)
class LstsqResult:
    x: np.ndarray
    rank: int
    rank_deficient: bool


def lstsq(A: np.ndarray, b: np.ndarray, rcond: Optional[float] = None) -> LstsqResult:
    """Minimum-norm least-squares solution of ``A x = b``; flags rank loss."""
    A = np.asarray(A)
    b = np.asarray(b)
    if A.shape[0] < A.shape[1]:
        raise ValueError(f"lstsq expects m >= n, got {A.shape}")
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(b))):
        raise NonFiniteInput("lstsq input contains non-finite entries")
    x, _, rank, _ = np.linalg.lstsq(A, b, rcond=rcond)
    return LstsqResult(x, int(rank), int(rank) < A.shape[1])
