"""Synthetic clustered linear-bandit environment.

Contexts are uniform on the unit sphere, so the context second moment is
I/d and the minimal eigenvalue needed by the clustering threshold is 1/d.
Rewards carry Gaussian(0, R^2) noise.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

# purpose tags for seeded streams
TAG_PROBLEM = 1
TAG_CONTEXTS = 2
TAG_NOISE = 3
TAG_PERMUTATION = 4


def stream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    """Independent generator keyed by (seed, purpose tag, *keys)."""
    return np.random.default_rng([int(seed), int(tag), *(int(k) for k in keys)])


@dataclass(frozen=True)
class ClusterProblem:
    V: int
    d: int
    clusters: tuple  # tuple of (members tuple, theta ndarray)
    gamma: float
    lam: float
    m: int
    R: float
    S: float
    seed: int = 0
    labels: np.ndarray = field(init=False, repr=False, compare=False)
    thetas: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        labels = np.full(self.V, -1, dtype=int)
        for k, (members, theta) in enumerate(self.clusters):
            for i in members:
                if labels[i] != -1:
                    raise ConfigurationError(f"agent {i} assigned to two clusters")
                labels[i] = k
            if np.linalg.norm(theta) > self.S * (1 + 1e-12):
                raise ConfigurationError("cluster parameter exceeds the norm bound S")
        if np.any(labels < 0):
            raise ConfigurationError("clusters do not cover every agent")
        thetas = np.stack([self.clusters[k][1] for k in labels])
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "thetas", thetas)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    def cluster_of(self, i: int) -> frozenset:
        return frozenset(self.clusters[self.labels[i]][0])

    def min_separation(self) -> float:
        thetas = [theta for _, theta in self.clusters]
        if len(thetas) < 2:
            return float("inf")
        return min(float(np.linalg.norm(a - b)) for a, b in itertools.combinations(thetas, 2))

    def describe(self) -> dict:
        return {
            "V": self.V,
            "d": self.d,
            "m": self.m,
            "R": self.R,
            "S": self.S,
            "gamma": self.gamma,
            "lambda": self.lam,
            "seed": self.seed,
            "clusters": [
                {"members": list(map(int, members)), "theta": [float(v) for v in theta]}
                for members, theta in self.clusters
            ],
        }


def _unit_rows(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / norms


def sample_context_set(rng: np.random.Generator, m: int, d: int) -> np.ndarray:
    """m i.i.d. vectors uniform on the unit sphere in R^d, shape (m, d)."""
    if m < 1 or d < 1:
        raise ValueError("need m >= 1 and d >= 1")
    return _unit_rows(rng.standard_normal((m, d)))


def reward(x, theta, rng: np.random.Generator, R: float) -> float:
    """x . theta plus N(0, R^2) noise."""
    x = np.asarray(x, dtype=float)
    noise = rng.standard_normal() if R > 0 else 0.0
    return float(x @ np.asarray(theta, dtype=float) + R * noise)


def round_contexts(seed: int, t: int, V: int, m: int, d: int) -> np.ndarray:
    """Contexts for every agent at round t, shape (V, m, d).

    Draws are laid out agent-major, so agent i's block depends only on
    (seed, round, agent) for fixed m and d.
    """
    return _unit_rows(stream(seed, TAG_CONTEXTS, t).standard_normal((V, m, d)))


def round_noise(seed: int, t: int, V: int) -> np.ndarray:
    """Standard-normal reward noise for every agent at round t, shape (V,)."""
    return stream(seed, TAG_NOISE, t).standard_normal(V)


def make_cluster_problem(
    cluster_sizes,
    d: int,
    gamma: float = 1.0,
    seed: int = 0,
    *,
    S: float = 1.0,
    R: float = 0.5,
    m: int = 10,
    lam: float | None = None,
    max_attempts: int = 10_000,
) -> ClusterProblem:
    """Draw cluster parameters on the radius-S sphere with pairwise separation >= gamma.

    Agents are assigned to clusters in contiguous index blocks.
    """
    sizes = [int(s) for s in cluster_sizes]
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigurationError("cluster sizes must be positive")
    if gamma <= 0:
        raise ConfigurationError("gamma must be > 0")
    if d < 1:
        raise ConfigurationError("d must be >= 1")
    rng = stream(seed, TAG_PROBLEM)
    k = len(sizes)
    for _ in range(max_attempts):
        thetas = S * _unit_rows(rng.standard_normal((k, d)))
        if all(
            np.linalg.norm(thetas[a] - thetas[b]) >= gamma
            for a, b in itertools.combinations(range(k), 2)
        ):
            break
    else:
        raise ConfigurationError(
            f"could not place {k} parameters with separation {gamma} on a sphere of radius {S} "
            f"in d={d} after {max_attempts} attempts"
        )
    clusters = []
    start = 0
    for size, theta in zip(sizes, thetas):
        clusters.append((tuple(range(start, start + size)), theta))
        start += size
    return ClusterProblem(
        V=start,
        d=d,
        clusters=tuple(clusters),
        gamma=float(gamma),
        lam=float(lam) if lam is not None else 1.0 / d,
        m=int(m),
        R=float(R),
        S=float(S),
        seed=int(seed),
    )
