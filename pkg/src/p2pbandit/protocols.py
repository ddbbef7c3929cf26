"""Information-sharing protocols as round-step state machines.

Every protocol owns the stacked active statistics of all agents,
``active_A`` (V, d, d) and ``active_b`` (V, d), and advances them with
``step(t, X, r)`` once the agents have played round t.

Gossip appends are scaled by the number of agents taking part in the
averaging, so that per-datum weights sum to V and concentrate at 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .linalg import PsdAccumulator
from .policy import PolicyState

TAGS = ("nosharing", "instsharing", "delayed", "roundrobin", "dcb", "dccb")


# --------------------------------------------------------------------------
# delay schedule
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DelaySchedule:
    """D(t) = ceil(multiplier * log_base(V^{3/2} t)), tau(t) = max(0, t - D(t)).

    A single agent has nobody to mix with, so its budget is 0.
    """

    V: int
    multiplier: float = 4.0
    log_base: float = 2.0

    def __post_init__(self):
        if self.V < 1:
            raise ConfigurationError("V must be >= 1")
        if self.multiplier < 0:
            raise ConfigurationError("delay multiplier must be >= 0")
        if self.log_base <= 1:
            raise ConfigurationError("log base must be > 1")

    def budget(self, t: int) -> int:
        if t < 1:
            raise ValueError("rounds start at 1")
        if self.V == 1 or self.multiplier == 0:
            return 0
        x = self.multiplier * math.log(self.V ** 1.5 * t) / math.log(self.log_base)
        return max(0, math.ceil(x - 1e-9))

    def tau(self, t: int) -> int:
        return max(0, t - self.budget(t))

    def max_delay(self, T: int) -> int:
        return max(k - self.tau(k) for k in range(1, T + 1))


def delay_budget(t: int, V: int, multiplier: float = 4.0, log_base: float = 2.0) -> int:
    return DelaySchedule(V, multiplier, log_base).budget(t)


# --------------------------------------------------------------------------
# permutations
# --------------------------------------------------------------------------

def draw_permutation(rng: np.random.Generator, groups) -> np.ndarray:
    """Independent uniform permutation inside each group; groups partition 0..V-1."""
    groups = [np.sort(np.asarray(g, dtype=int)) for g in groups]
    V = sum(len(g) for g in groups)
    sigma = np.full(V, -1, dtype=int)
    for g in groups:
        sigma[g] = g[rng.permutation(len(g))]
    if np.any(sigma < 0) or len(set(sigma.tolist())) != V:
        raise ValueError("groups must partition the agents")
    return sigma


# --------------------------------------------------------------------------
# per-agent object model (reference path)
# --------------------------------------------------------------------------

@dataclass
class ShareBuffer:
    """Ordered (matrix, vector) contributions waiting for the mixing delay, oldest first."""

    entries: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def averaged_with(self, other: "ShareBuffer") -> "ShareBuffer":
        if len(self) != len(other):
            raise ProtocolError(
                f"cannot average buffers of length {len(self)} and {len(other)}"
            )
        return ShareBuffer([
            (0.5 * (ma + mb), 0.5 * (va + vb))
            for (ma, va), (mb, vb) in zip(self.entries, other.entries)
        ])


@dataclass
class AgentState:
    active: PolicyState
    buffer: ShareBuffer
    local: PolicyState
    neighbors: frozenset

    @classmethod
    def initial(cls, i: int, V: int, d: int) -> "AgentState":
        return cls(PolicyState.initial(d), ShareBuffer(), PolicyState.initial(d), frozenset(range(V)))


def gossip_round_states(states, sigma, X, r, t: int, schedule: DelaySchedule, scale=None):
    """Gossip round over a list of AgentState objects.

    Plain per-agent implementation kept as an oracle for GossipNetwork.
    Reads only start-of-round buffers, so agent order is irrelevant.
    """
    V = len(states)
    scale = np.full(V, float(V)) if scale is None else np.asarray(scale, dtype=float)
    D = schedule.budget(t)
    out = []
    for i, s in enumerate(states):
        buf = s.buffer.averaged_with(states[sigma[i]].buffer)
        x = np.asarray(X[i], dtype=float)
        buf.entries.append((scale[i] * np.outer(x, x), scale[i] * r[i] * x))
        A, b = s.active.A.matrix, s.active.b
        while len(buf) > D:
            m, v = buf.entries.pop(0)
            A, b = A + m, b + v
        active = s.active if A is s.active.A.matrix else PolicyState(PsdAccumulator(A), b)
        out.append(AgentState(active, buf, s.local, s.neighbors))
    return out


# --------------------------------------------------------------------------
# weight instrumentation
# --------------------------------------------------------------------------

class WeightTrace:
    """Exact per-datum weights carried through averaging, flushes and resets.

    Datum (source agent i', source round t') has column (t'-1) V + i'.
    ``buffer[i, s]`` is the coefficient row of agent i's buffer slot s and
    ``active[i]`` the coefficients of its active matrix minus the identity.
    """

    MAX_DATA = 10_000

    def __init__(self, V: int, T: int, labels=None, snapshot_budget: int = 40_000_000):
        if V * T > self.MAX_DATA:
            raise ConfigurationError(
                f"weight tracking needs V*T <= {self.MAX_DATA}, got {V}*{T}={V * T}"
            )
        self.V, self.T = V, T
        self.N = V * T
        self.active = np.zeros((V, self.N))
        self.buffer = np.zeros((V, 8, self.N))
        self.length = 0
        self.labels = None if labels is None else np.asarray(labels)
        self.rounds = 0
        self.holder_dev: list[float] = []
        self.source_dev: list[float] = []
        self.min_weight: list[float] = []
        self.cross_mass: list[np.ndarray] = []
        self.flushed_at: list[int] = []
        per_snapshot = V * self.N
        self.snapshot_stride = max(1, math.ceil(per_snapshot * T / snapshot_budget))
        self.snapshots: dict[int, np.ndarray] = {0: self.active.copy()}
        if self.labels is not None:
            src_labels = np.tile(self.labels, T)
            self._foreign = self.labels[:, None] != src_labels[None, :]

    def key(self, i: int, t: int) -> int:
        return (t - 1) * self.V + i

    def weights_of(self, t_src: int) -> np.ndarray:
        """Current total weight (V holders x V sources) of round t_src's data."""
        cols = slice((t_src - 1) * self.V, t_src * self.V)
        return self.active[:, cols] + self.buffer[:, : self.length, cols].sum(axis=1)

    def _grow(self):
        extra = np.zeros_like(self.buffer)
        self.buffer = np.concatenate([self.buffer, extra], axis=1)

    def track(self, t: int, sigma, scale, budget: int, share_mask=None, resets=()):
        """Advance the weights through one gossip round.

        sigma: partner of each agent; scale: append weight per agent;
        share_mask: agents that actually average (all when None);
        resets: agents whose state falls back to their own data.
        """
        V, L = self.V, self.length
        if t != self.rounds + 1:
            raise ProtocolError(f"weight trace expected round {self.rounds + 1}, got {t}")
        if t > self.T:
            raise ProtocolError("weight trace horizon exceeded")
        if L:
            cur = self.buffer[:, :L]
            mixed = 0.5 * (cur + cur[sigma])
            if share_mask is not None:
                mixed = np.where(np.asarray(share_mask)[:, None, None], mixed, cur)
            self.buffer[:, :L] = mixed
        if L + 1 > self.buffer.shape[1]:
            self._grow()
        self.buffer[:, L] = 0.0
        keys = (t - 1) * V + np.arange(V)
        self.buffer[np.arange(V), L, keys] = np.asarray(scale, dtype=float)
        self.length = L + 1
        while self.length > budget:
            self.active += self.buffer[:, 0]
            self.buffer[:, : self.length - 1] = self.buffer[:, 1 : self.length]
            self.length -= 1
        for i in resets:
            own = np.zeros(self.N)
            own[i : t * V : V] = 1.0
            self.active[i] = own
            if self.length:
                self.buffer[i, : self.length] = 0.0
                self.buffer[i, self.length - 1] = own
        self.rounds = t
        self._record(t)

    def _record(self, t: int):
        n_in = t * self.V
        total = self.active[:, :n_in] + self.buffer[:, : self.length, :n_in].sum(axis=1)
        self.holder_dev.append(float(np.max(np.abs(total.sum(axis=0) - self.V))))
        f = self.flushed_rounds
        if f:
            rows = self.active[:, : f * self.V].reshape(self.V, f, self.V).sum(axis=2)
            self.source_dev.append(float(np.max(np.abs(rows - self.V))))
        else:
            self.source_dev.append(0.0)
        self.min_weight.append(float(min(total.min(), self.active.min())))
        if self.labels is not None:
            self.cross_mass.append(np.sum(np.where(self._foreign[:, :n_in], total, 0.0), axis=1))
        self.flushed_at.append(f)
        if t % self.snapshot_stride == 0:
            self.snapshots[t] = self.active.copy()

    @property
    def flushed_rounds(self) -> int:
        """Source rounds that have left the buffers (every agent flushes in lockstep)."""
        return self.rounds - self.length


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------

class Protocol:
    """Common state: stacked active matrices and b-vectors of all agents."""

    tag = ""

    def __init__(self, V: int, d: int):
        if V < 1 or d < 1:
            raise ConfigurationError("need V >= 1 and d >= 1")
        self.V, self.d = V, d
        self.active_A = np.tile(np.eye(d), (V, 1, 1))
        self.active_b = np.zeros((V, d))
        self.sent_buffer_length = 0

    def step(self, t: int, X: np.ndarray, r: np.ndarray) -> None:
        raise NotImplementedError

    def agent(self, i: int) -> AgentState:
        A = PsdAccumulator(self.active_A[i])
        return AgentState(PolicyState(A, self.active_b[i].copy()), ShareBuffer(),
                          PolicyState(A, self.active_b[i].copy()), frozenset(range(self.V)))

    def neighbor_sets(self):
        return [frozenset(range(self.V))] * self.V

    def complete_rounds(self, t: int) -> int:
        """After step t: latest round whose data sits in every active state."""
        return t


def _outer(X: np.ndarray) -> np.ndarray:
    return X[:, :, None] * X[:, None, :]


def _add_pooled(A: np.ndarray, b: np.ndarray, X: np.ndarray, r: np.ndarray) -> None:
    """Add every row of (X, r) to every agent, one observation at a time in agent order."""
    for x, rr in zip(X, r):
        A += np.outer(x, x)
        b += rr * x


class NoSharing(Protocol):
    tag = "nosharing"

    def step(self, t, X, r):
        self.active_A += _outer(X)
        self.active_b += r[:, None] * X


class InstSharing(Protocol):
    tag = "instsharing"

    def step(self, t, X, r):
        _add_pooled(self.active_A, self.active_b, X, r)


class DelayedInstSharing(Protocol):
    """Every agent holds A_0 plus all pooled observations of rounds <= tau(t)."""

    tag = "delayed"

    def __init__(self, V, d, schedule: DelaySchedule | None = None):
        super().__init__(V, d)
        self.schedule = schedule or DelaySchedule(V)
        self.pending: dict[int, tuple] = {}
        self.included = 0

    def step(self, t, X, r):
        self.pending[t] = (np.array(X, dtype=float), np.array(r, dtype=float))
        target = self.schedule.tau(t)
        while self.included < target:
            self.included += 1
            Xs, rs = self.pending.pop(self.included)
            _add_pooled(self.active_A, self.active_b, Xs, rs)

    def complete_rounds(self, t):
        return self.included


class RoundRobin(Protocol):
    """Observations travel one hop per round along the ring 0 -> 1 -> ... -> V-1 -> 0.

    Agent j adds agent (j - k mod V)'s round-s observation at round s + k.
    """

    tag = "roundrobin"

    def __init__(self, V, d):
        super().__init__(V, d)
        self.history: list[tuple] = []

    def step(self, t, X, r):
        self.history.append((np.array(X, dtype=float), np.array(r, dtype=float)))
        self.history = self.history[-self.V:]
        for k in range(min(self.V, t)):
            Xs, rs = self.history[-1 - k]
            src = (np.arange(self.V) - k) % self.V
            self.active_A += _outer(Xs[src])
            self.active_b += rs[src, None] * Xs[src]

    def complete_rounds(self, t):
        return max(0, t - self.V + 1)


class GossipNetwork(Protocol):
    """Buffered gossip state shared by DCB and DCCB (stacked over agents)."""

    def __init__(self, V, d, schedule: DelaySchedule | None = None,
                 rng: np.random.Generator | None = None, weights: WeightTrace | None = None):
        super().__init__(V, d)
        self.schedule = schedule or DelaySchedule(V)
        self.rng = rng if rng is not None else np.random.default_rng()
        self.weights = weights
        self.buf_A = np.zeros((V, 8, d, d))
        self.buf_b = np.zeros((V, 8, d))
        self.length = 0
        self.last_sigma = np.arange(V)

    def _grow(self):
        self.buf_A = np.concatenate([self.buf_A, np.zeros_like(self.buf_A)], axis=1)
        self.buf_b = np.concatenate([self.buf_b, np.zeros_like(self.buf_b)], axis=1)

    def mix_append_flush(self, t, sigma, X, r, scale, share_mask=None):
        """Average with sigma's start-of-round buffers, append scaled data, flush to D(t)."""
        sigma = np.asarray(sigma, dtype=int)
        L = self.length
        self.sent_buffer_length = L
        if L:
            curA, curb = self.buf_A[:, :L], self.buf_b[:, :L]
            mixA = 0.5 * (curA + curA[sigma])
            mixb = 0.5 * (curb + curb[sigma])
            if share_mask is not None:
                mask = np.asarray(share_mask, dtype=bool)
                mixA = np.where(mask[:, None, None, None], mixA, curA)
                mixb = np.where(mask[:, None, None], mixb, curb)
            self.buf_A[:, :L] = mixA
            self.buf_b[:, :L] = mixb
        if L + 1 > self.buf_A.shape[1]:
            self._grow()
        scale = np.asarray(scale, dtype=float)
        self.buf_A[:, L] = scale[:, None, None] * _outer(X)
        self.buf_b[:, L] = (scale * r)[:, None] * X
        self.length = L + 1
        budget = self.schedule.budget(t)
        while self.length > budget:
            self.active_A += self.buf_A[:, 0]
            self.active_b += self.buf_b[:, 0]
            n = self.length
            self.buf_A[:, : n - 1] = self.buf_A[:, 1:n]
            self.buf_b[:, : n - 1] = self.buf_b[:, 1:n]
            self.length -= 1
        return budget

    def complete_rounds(self, t):
        return t - self.length

    def buffer_of(self, i: int) -> ShareBuffer:
        return ShareBuffer([(self.buf_A[i, s].copy(), self.buf_b[i, s].copy())
                            for s in range(self.length)])

    def agent(self, i: int) -> AgentState:
        st = super().agent(i)
        return AgentState(st.active, self.buffer_of(i), st.local, st.neighbors)

    def load_states(self, states) -> None:
        """Overwrite the network from a list of AgentState objects (equal buffer lengths)."""
        lengths = {len(s.buffer) for s in states}
        if len(lengths) != 1:
            raise ProtocolError(f"agents hold buffers of different lengths: {sorted(lengths)}")
        L = lengths.pop()
        while L > self.buf_A.shape[1]:
            self._grow()
        for i, s in enumerate(states):
            self.active_A[i] = s.active.A.matrix
            self.active_b[i] = s.active.b
            for k, (m, v) in enumerate(s.buffer.entries):
                self.buf_A[i, k] = m
                self.buf_b[i, k] = v
        self.length = L


class Gossip(GossipNetwork):
    """DCB sharing: uniform permutation, average, append V-scaled data, flush."""

    tag = "dcb"

    def step(self, t, X, r):
        sigma = draw_permutation(self.rng, [np.arange(self.V)])
        self.last_sigma = sigma
        scale = np.full(self.V, float(self.V))
        budget = self.mix_append_flush(t, sigma, X, r, scale)
        if self.weights is not None:
            self.weights.track(t, sigma, scale, budget)
            if self.weights.length != self.length:
                raise ProtocolError("weight trace out of sync with buffers")


def gossip_round(net: GossipNetwork, sigma, X, r, t: int):
    """One DCB gossip round with an externally supplied permutation."""
    scale = np.full(net.V, float(net.V))
    budget = net.mix_append_flush(t, sigma, X, r, scale)
    if net.weights is not None:
        net.weights.track(t, sigma, scale, budget)
    return net
