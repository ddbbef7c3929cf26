"""Distributed clustering on top of gossip sharing.

Each agent keeps its own (local) ridge statistics and a neighbour set.
When two agents meet, they compare local estimates against a
time-dependent threshold: close estimates with equal neighbour sets
share as in DCB, close estimates with different sets do nothing, and
distant estimates cut the edge and reset both agents to their own data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .linalg import PsdAccumulator
from .policy import PolicyState
from .protocols import (
    AgentState,
    DelaySchedule,
    GossipNetwork,
    ShareBuffer,
    WeightTrace,
    _outer,
)


def a_lambda(t: float, delta: float, lam: float, rate: float | None = None) -> float:
    """lam t / delta - 8 ln((t+3)/delta) - 2 sqrt(t ln((t+3)/delta)).

    ``rate`` replaces the 1/delta factor of the leading term when given.
    """
    lead = lam * t * (1.0 / delta if rate is None else rate)
    log_term = math.log((t + 3.0) / delta)
    return lead - 8.0 * log_term - 2.0 * math.sqrt(t * log_term)


def threshold(t: float, R: float, d: int, delta: float, lam: float, rate: float | None = None) -> float:
    num = R * math.sqrt(max(2.0 * d * math.log(t) + 2.0 * math.log(2.0 / delta), 0.0)) + 1.0
    den = math.sqrt(1.0 + max(a_lambda(t, delta / (4.0 * d), lam, rate), 0.0))
    return num / den


@dataclass(frozen=True)
class ThresholdParams:
    lam: float
    delta: float
    R: float
    d: int
    rate: float | None = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ConfigurationError("lambda must be > 0")
        if not 0 < self.delta < 1:
            raise ConfigurationError("delta must lie in (0, 1)")
        if self.rate is not None and self.rate <= 0:
            raise ConfigurationError("threshold rate override must be > 0")

    def __call__(self, t: float) -> float:
        return threshold(t, self.R, self.d, self.delta, self.lam, self.rate)


def should_prune(theta_i, theta_j, c: float) -> bool:
    """True iff the estimates are strictly further apart than c."""
    return bool(np.linalg.norm(np.asarray(theta_i, float) - np.asarray(theta_j, float)) > c)


@dataclass(frozen=True)
class PruneEvent:
    round: int
    agent_a: int
    agent_b: int
    distance: float
    threshold: float


def prune_and_reset(state_i: AgentState, state_j: AgentState, i: int, j: int, length: int):
    """Cut the edge i-j and drop both agents back to their own observations.

    The buffer keeps ``length`` slots: zeros followed by the local payload
    (A_local - I, b_local); the active statistics become the local ones.
    """
    out = []
    for s, other in ((state_i, j), (state_j, i)):
        d = s.local.b.shape[0]
        entries = [(np.zeros((d, d)), np.zeros(d)) for _ in range(max(length - 1, 0))]
        if length > 0:
            entries.append((s.local.A.matrix - np.eye(d), s.local.b.copy()))
        out.append(AgentState(
            active=PolicyState(s.local.A, s.local.b.copy()),
            buffer=ShareBuffer(entries),
            local=s.local,
            neighbors=s.neighbors - {other},
        ))
    return out[0], out[1]


def _components(neighbors: np.ndarray):
    V = neighbors.shape[0]
    seen = np.zeros(V, dtype=bool)
    comps = []
    for start in range(V):
        if seen[start]:
            continue
        stack, comp = [start], []
        seen[start] = True
        while stack:
            a = stack.pop()
            comp.append(a)
            for b in np.flatnonzero(neighbors[a] & ~seen):
                seen[b] = True
                stack.append(int(b))
        comps.append(np.array(sorted(comp)))
    return comps


def draw_neighbour_permutation(rng: np.random.Generator, neighbors: np.ndarray,
                               attempts: int = 64) -> np.ndarray:
    """Random permutation with sigma(i) in the neighbour set of i for every agent.

    Components whose members all list exactly the component get a uniform
    permutation. Otherwise agents pick, in random order, a uniform partner
    among their still-free neighbours; dead ends restart, and identity is
    the fallback (self is always a neighbour).
    """
    neighbors = np.asarray(neighbors, dtype=bool)
    V = neighbors.shape[0]
    sigma = np.arange(V)
    for comp in _components(neighbors):
        sub = neighbors[np.ix_(comp, comp)]
        if sub.all():
            sigma[comp] = comp[rng.permutation(len(comp))]
            continue
        n = len(comp)
        for _ in range(attempts):
            taken = np.zeros(n, dtype=bool)
            local = np.full(n, -1)
            for a in rng.permutation(n):
                cand = np.flatnonzero(sub[a] & ~taken)
                if cand.size == 0:
                    break
                pick = cand[rng.integers(cand.size)]
                taken[pick] = True
                local[a] = pick
            else:
                sigma[comp] = comp[local]
                break
    return sigma


class DCCB(GossipNetwork):
    """DCB sharing restricted by locally learned neighbour sets."""

    tag = "dccb"

    def __init__(self, V, d, params: ThresholdParams, schedule: DelaySchedule | None = None,
                 rng=None, weights: WeightTrace | None = None):
        super().__init__(V, d, schedule=schedule, rng=rng, weights=weights)
        self.params = params
        self.local_A = np.tile(np.eye(d), (V, 1, 1))
        self.local_b = np.zeros((V, d))
        self.neighbors = np.ones((V, V), dtype=bool)
        self.last_share = np.ones(V, dtype=bool)
        self.last_events: list[PruneEvent] = []
        self.last_threshold = float("nan")

    def local_estimates(self) -> np.ndarray:
        return np.linalg.solve(self.local_A, self.local_b[:, :, None])[:, :, 0]

    def neighbor_sets(self):
        return [frozenset(np.flatnonzero(row).tolist()) for row in self.neighbors]

    def agent(self, i: int) -> AgentState:
        st = super().agent(i)
        return AgentState(st.active, st.buffer,
                          PolicyState(PsdAccumulator(self.local_A[i]), self.local_b[i].copy()),
                          frozenset(np.flatnonzero(self.neighbors[i]).tolist()))

    def groups(self):
        """Maximal sets of agents with identical neighbour sets."""
        seen: dict[bytes, list[int]] = {}
        for i, row in enumerate(self.neighbors):
            seen.setdefault(row.tobytes(), []).append(i)
        return list(seen.values())

    def step(self, t, X, r):
        sigma = draw_neighbour_permutation(self.rng, self.neighbors)
        return self.round(t, sigma, X, r)

    def round(self, t, sigma, X, r):
        """Local update, threshold test, three-case share rule, resets."""
        V = self.V
        sigma = np.asarray(sigma, dtype=int)
        self.last_sigma = sigma
        self.local_A += _outer(X)
        self.local_b += r[:, None] * X
        est = self.local_estimates()
        c = self.params(t)
        self.last_threshold = c
        dist = np.linalg.norm(est - est[sigma], axis=1)
        contact = sigma != np.arange(V)
        prune = contact & (dist > c) & self.neighbors[np.arange(V), sigma]
        same = np.all(self.neighbors == self.neighbors[sigma], axis=1)
        share = ~prune & same
        scale = self.neighbors.sum(axis=1).astype(float)
        budget = self.mix_append_flush(t, sigma, X, r, scale, share_mask=share)

        events, resets = [], set()
        for i in np.flatnonzero(prune):
            j = int(sigma[i])
            a, b = min(i, j), max(i, j)
            if self.neighbors[a, b]:
                events.append(PruneEvent(t, int(a), int(b), float(dist[i]), c))
                self.neighbors[a, b] = self.neighbors[b, a] = False
            resets.update((int(i), j))
        for i in sorted(resets):
            self._reset(i)
        self.last_share = share
        self.last_events = events
        if self.weights is not None:
            self.weights.track(t, sigma, scale, budget, share_mask=share, resets=sorted(resets))
        return events

    def _reset(self, i: int):
        L = self.length
        self.active_A[i] = self.local_A[i]
        self.active_b[i] = self.local_b[i]
        if L:
            self.buf_A[i, :L] = 0.0
            self.buf_b[i, :L] = 0.0
            self.buf_A[i, L - 1] = self.local_A[i] - np.eye(self.d)
            self.buf_b[i, L - 1] = self.local_b[i]


def dccb_round(net: DCCB, sigma, X, r, t: int):
    """One DCCB round with an externally supplied permutation; returns prune events."""
    return net.round(t, sigma, X, r)


def dccb_round_states(states, sigma, X, r, t: int, schedule: DelaySchedule, c: float):
    """Per-agent DCCB round over AgentState objects (oracle for the stacked network)."""
    V = len(states)
    X = np.asarray(X, dtype=float)
    updated = []
    for i, s in enumerate(states):
        x = X[i]
        local = PolicyState(PsdAccumulator(s.local.A.matrix + np.outer(x, x)), s.local.b + r[i] * x)
        updated.append(AgentState(s.active, s.buffer, local, s.neighbors))
    est = [u.local.A.solve(u.local.b) for u in updated]
    D = schedule.budget(t)
    out, pruned = [], []
    for i, s in enumerate(updated):
        j = int(sigma[i])
        close = not (j != i and np.linalg.norm(est[i] - est[j]) > c)
        if close and s.neighbors == updated[j].neighbors:
            buf = s.buffer.averaged_with(updated[j].buffer)
        else:
            buf = ShareBuffer(list(s.buffer.entries))
        if not close:
            pruned.append((i, j))
        k = float(len(s.neighbors))
        buf.entries.append((k * np.outer(X[i], X[i]), (k * r[i]) * X[i]))
        A, b = s.active.A.matrix, s.active.b
        while len(buf) > D:
            m, v = buf.entries.pop(0)
            A, b = A + m, b + v
        out.append(AgentState(PolicyState(PsdAccumulator(A), b), buf, s.local, s.neighbors))
    for i, j in pruned:
        L = len(out[i].buffer)
        out[i], out[j] = prune_and_reset(out[i], out[j], i, j, L)
    return out
