"""Dense PD-matrix bookkeeping shared by every part of the simulator.

The accumulator keeps the matrix itself and refreshes a Cholesky factor
lazily. An explicit inverse is never maintained: buffer averaging adds
full-rank PSD blocks, for which rank-one inverse updates do not apply.
"""

from __future__ import annotations

import math

import numpy as np


class PsdAccumulator:
    """Symmetric positive-definite d x d matrix with cached log-determinant.

    Instances are treated as values: every update returns a new accumulator.
    """

    __slots__ = ("_matrix", "_logdet", "_chol")

    def __init__(self, matrix, logdet: float | None = None):
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("matrix has non-finite entries")
        m.setflags(write=False)
        self._matrix = m
        self._chol = None
        self._logdet = logdet

    @classmethod
    def identity(cls, d: int) -> "PsdAccumulator":
        return cls(np.eye(d), logdet=0.0)

    @property
    def dim(self) -> int:
        return self._matrix.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self._matrix

    @property
    def cholesky(self) -> np.ndarray:
        if self._chol is None:
            try:
                self._chol = np.linalg.cholesky(self._matrix)
            except np.linalg.LinAlgError as exc:
                raise np.linalg.LinAlgError("accumulator is not positive definite") from exc
        return self._chol

    @property
    def logdet(self) -> float:
        if self._logdet is None:
            self._logdet = 2.0 * float(np.sum(np.log(np.diag(self.cholesky))))
        return self._logdet

    def solve(self, y) -> np.ndarray:
        """Return M^{-1} y using the cached factor."""
        chol = self.cholesky
        z = np.linalg.solve(chol, np.asarray(y, dtype=float))
        return np.linalg.solve(chol.T, z)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self._matrix)[0])

    def add(self, other) -> "PsdAccumulator":
        """Return M + P for a PSD matrix P (logdet recomputed on demand)."""
        p = other.matrix if isinstance(other, PsdAccumulator) else np.asarray(other, dtype=float)
        if p.shape != self._matrix.shape:
            raise ValueError(f"dimension mismatch: {self._matrix.shape} vs {p.shape}")
        return PsdAccumulator(self._matrix + p)

    def __repr__(self) -> str:
        return f"PsdAccumulator(d={self.dim}, logdet={self.logdet:.6g})"


def _as_vector(x, d: int) -> np.ndarray:
    v = np.asarray(x, dtype=float)
    if v.shape != (d,):
        raise ValueError(f"expected a vector of length {d}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def weighted_norm_sq(m: PsdAccumulator, x) -> float:
    """x^T M^{-1} x, computed through the Cholesky factor."""
    v = _as_vector(x, m.dim)
    z = np.linalg.solve(m.cholesky, v)
    return float(z @ z)


def rank_one_update(m: PsdAccumulator, x, c: float = 1.0) -> PsdAccumulator:
    """Return M + c x x^T with the log-determinant carried forward.

    Uses det(M + c x x^T) = det(M) (1 + c ||x||^2_{M^{-1}}).
    """
    v = _as_vector(x, m.dim)
    c = float(c)
    if not math.isfinite(c):
        raise ValueError("weight must be finite")
    if c < 0:
        raise ValueError("weight must be non-negative")
    if c == 0.0:
        return m
    logdet = m.logdet + math.log1p(c * weighted_norm_sq(m, v))
    return PsdAccumulator(m.matrix + c * np.outer(v, v), logdet=logdet)


def convex_average(a: PsdAccumulator, b: PsdAccumulator) -> PsdAccumulator:
    """Elementwise mean (A + B) / 2."""
    if a.dim != b.dim:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    return PsdAccumulator(0.5 * (a.matrix + b.matrix))


def batched_solve_norms(A: np.ndarray, b: np.ndarray, X: np.ndarray):
    """Per-agent ridge estimates and context norms for stacked matrices.

    A: (V, d, d) PD matrices, b: (V, d), X: (V, m, d) contexts.
    Returns (theta_hat (V, d), norms_sq (V, m), logdet (V,)).
    """
    chol = np.linalg.cholesky(A)
    rhs = np.concatenate([b[:, :, None], np.swapaxes(X, 1, 2)], axis=2)
    sol = np.linalg.solve(A, rhs)
    theta = sol[:, :, 0]
    norms = np.einsum("vmd,vdm->vm", X, sol[:, :, 1:])
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=1, axis2=2)), axis=1)
    return theta, np.maximum(norms, 0.0), logdet
