"""Confidence-ball action selection over an arbitrary (A, b) pair.

The radius is the standard OFUL radius. The weight-imbalance factor that
appears in the analysis of gossip sharing is not an algorithm input and
is fixed to 1 here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import PsdAccumulator, batched_solve_norms


@dataclass(frozen=True)
class ConfidenceParams:
    delta: float
    R: float
    S: float
    logdet0: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.R < 0 or self.S < 0:
            raise ValueError("R and S must be non-negative")


@dataclass(frozen=True)
class PolicyState:
    A: PsdAccumulator
    b: np.ndarray

    @classmethod
    def initial(cls, d: int) -> "PolicyState":
        return cls(PsdAccumulator.identity(d), np.zeros(d))


def radius_from_logdet(logdet_ratio, R: float, S: float, delta: float):
    """R sqrt(2 (logdet_ratio / 2 - ln delta)) + S; vectorises over logdet_ratio."""
    inner = np.maximum(np.asarray(logdet_ratio, dtype=float) - 2.0 * math.log(delta), 0.0)
    out = R * np.sqrt(inner) + S
    return float(out) if np.ndim(out) == 0 else out


def confidence_radius(state: PolicyState, p: ConfidenceParams) -> float:
    return radius_from_logdet(state.A.logdet - p.logdet0, p.R, p.S, p.delta)


def local_estimate(state: PolicyState) -> np.ndarray:
    """Ridge estimate A^{-1} b."""
    return state.A.solve(state.b)


def ucb_scores(contexts, state: PolicyState, radius: float) -> np.ndarray:
    X = np.atleast_2d(np.asarray(contexts, dtype=float))
    theta = local_estimate(state)
    z = np.linalg.solve(state.A.cholesky, X.T)
    widths = np.sqrt(np.maximum(np.sum(z * z, axis=0), 0.0))
    return X @ theta + radius * widths


def select_action(contexts, state: PolicyState, radius: float):
    """Optimistic action: argmax_x  x.theta_hat + radius ||x||_{A^{-1}}.

    This equals the joint argmax over contexts and the ellipsoid
    {theta : ||theta - theta_hat||_A <= radius}. Ties go to the lowest index.
    """
    X = np.atleast_2d(np.asarray(contexts, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("empty context set")
    idx = int(np.argmax(ucb_scores(X, state, radius)))
    return idx, X[idx]


def select_actions_batched(contexts: np.ndarray, A: np.ndarray, b: np.ndarray,
                           R: float, S: float, delta: float, logdet0: float = 0.0):
    """Vectorised selection for all agents at once.

    contexts: (V, m, d); A: (V, d, d); b: (V, d).
    Returns (indices (V,), theta_hat (V, d), radius (V,), logdet (V,)).
    """
    theta, norms, logdet = batched_solve_norms(A, b, contexts)
    radius = radius_from_logdet(logdet - logdet0, R, S, delta)
    scores = np.einsum("vmd,vd->vm", contexts, theta) + np.atleast_1d(radius)[:, None] * np.sqrt(norms)
    return np.argmax(scores, axis=1), theta, np.atleast_1d(radius), logdet
