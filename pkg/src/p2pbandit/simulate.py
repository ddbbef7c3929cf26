"""Run configuration, seeded experiment loop and CSV output."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
from dataclasses import dataclass, field
from types import SimpleNamespace

import numpy as np

from .dccb import DCCB, ThresholdParams
from .env import (
    TAG_PERMUTATION,
    ClusterProblem,
    make_cluster_problem,
    round_contexts,
    round_noise,
    stream,
)
from .errors import ConfigurationError
from .metrics import (
    bound_dccb,
    bound_delayed,
    bound_dcb,
    bound_nosharing,
    comm_bits,
)
from .policy import select_actions_batched
from .protocols import (
    TAGS,
    DelaySchedule,
    DelayedInstSharing,
    Gossip,
    InstSharing,
    NoSharing,
    Protocol,
    RoundRobin,
    WeightTrace,
)

RUN_COLUMNS = ["run_id", "protocol", "seed", "round", "network_cum_regret", "comm_bits_round",
               "comm_bits_cum", "clusters_discovered_frac"]
PRUNE_COLUMNS = ["round", "agent_a", "agent_b", "distance", "threshold"]


@dataclass(frozen=True)
class RunConfig:
    protocol: str = "dcb"
    V: int = 16
    d: int = 5
    m: int = 10
    T: int = 2000
    delta: float = 0.1
    R: float = 0.5
    S: float = 1.0
    gamma: float = 1.0
    clusters: tuple | None = None
    lam: float | None = None
    seed: int = 0
    delay_multiplier: float = 4.0
    log_base: float = 2.0
    threshold_rate: float | None = None
    track_weights: bool = False
    emit_bounds: bool = False
    lemma_checks: bool = False
    per_agent: bool = False
    checkpoints: tuple = ()

    def __post_init__(self):
        validate(self)

    @property
    def cluster_sizes(self) -> tuple:
        return self.clusters if self.clusters else (self.V,)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def validate(cfg, lines: dict | None = None) -> None:
    lines = lines or {}

    def fail(key, msg):
        raise ConfigurationError(f"{key}: {msg}", lines.get(key))

    if cfg.protocol not in TAGS:
        fail("protocol", f"unknown protocol {cfg.protocol!r}; expected one of {', '.join(TAGS)}")
    for key in ("V", "d", "m", "T"):
        if getattr(cfg, key) < 1:
            fail(key, "must be >= 1")
    if not 0 < cfg.delta < 1:
        fail("delta", f"must lie in (0, 1), got {cfg.delta}")
    if cfg.R < 0:
        fail("R", "must be >= 0")
    if cfg.S <= 0:
        fail("S", "must be > 0")
    if cfg.gamma <= 0:
        fail("gamma", "must be > 0")
    if cfg.lam is not None and cfg.lam <= 0:
        fail("lambda", "must be > 0")
    if cfg.delay_multiplier < 0:
        fail("delay_multiplier", "must be >= 0")
    if cfg.log_base <= 1:
        fail("log_base", "must be > 1")
    if cfg.threshold_rate is not None and cfg.threshold_rate <= 0:
        fail("threshold_rate", "must be > 0")
    if cfg.clusters is not None:
        if any(c < 1 for c in cfg.clusters):
            fail("clusters", "sizes must be >= 1")
        if sum(cfg.clusters) != cfg.V:
            fail("clusters", f"sizes sum to {sum(cfg.clusters)} but V={cfg.V}")
    if any(c < 1 or c > cfg.T for c in cfg.checkpoints):
        fail("checkpoints", "must lie in [1, T]")


# key -> (field name, parser)
def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_tuple(s: str) -> tuple:
    return tuple(int(p) for p in s.replace(";", ",").split(",") if p.strip())


_KEYS = {
    "protocol": ("protocol", lambda s: s.strip().lower()),
    "V": ("V", int),
    "d": ("d", int),
    "m": ("m", int),
    "T": ("T", int),
    "delta": ("delta", float),
    "R": ("R", float),
    "S": ("S", float),
    "gamma": ("gamma", float),
    "clusters": ("clusters", _int_tuple),
    "lambda": ("lam", float),
    "seed": ("seed", int),
    "delay_multiplier": ("delay_multiplier", float),
    "log_base": ("log_base", float),
    "threshold_rate": ("threshold_rate", float),
    "track_weights": ("track_weights", _bool),
    "emit_bounds": ("emit_bounds", _bool),
    "lemma_checks": ("lemma_checks", _bool),
    "per_agent": ("per_agent", _bool),
    "checkpoints": ("checkpoints", _int_tuple),
}


def parse_config(text: str, **overrides) -> RunConfig:
    """Parse flat ``key=value`` lines; ``#`` starts a comment.

    Keyword overrides (already typed, using field names) win over file keys.
    If cluster sizes are given without V, V is their sum.
    """
    values: dict = {}
    lines: dict = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected key=value, got {raw.strip()!r}", n)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigurationError(f"unknown key {key!r}", n)
        if key in lines:
            raise ConfigurationError(f"duplicate key {key!r}", n)
        name, conv = _KEYS[key]
        try:
            values[name] = conv(val)
        except ValueError as exc:
            raise ConfigurationError(f"{key}: bad value {val!r} ({exc})", n) from None
        lines[key] = n
    values.update({k: v for k, v in overrides.items() if v is not None})
    if values.get("clusters") and "V" not in values:
        values["V"] = sum(values["clusters"])
    defaults = {f.name: f.default for f in dataclasses.fields(RunConfig)}
    merged = {**defaults, **values}
    validate(SimpleNamespace(**merged), lines)
    return RunConfig(**merged)


def make_problem(cfg: RunConfig) -> ClusterProblem:
    return make_cluster_problem(cfg.cluster_sizes, cfg.d, cfg.gamma, cfg.seed,
                                S=cfg.S, R=cfg.R, m=cfg.m, lam=cfg.lam)


def make_protocol(tag: str, V: int, d: int, *, schedule: DelaySchedule | None = None,
                  rng: np.random.Generator | None = None, weights: WeightTrace | None = None,
                  threshold: ThresholdParams | None = None) -> Protocol:
    schedule = schedule or DelaySchedule(V)
    if tag == "nosharing":
        return NoSharing(V, d)
    if tag == "instsharing":
        return InstSharing(V, d)
    if tag == "delayed":
        return DelayedInstSharing(V, d, schedule)
    if tag == "roundrobin":
        return RoundRobin(V, d)
    if tag == "dcb":
        return Gossip(V, d, schedule=schedule, rng=rng, weights=weights)
    if tag == "dccb":
        if threshold is None:
            raise ConfigurationError("dccb needs threshold parameters")
        return DCCB(V, d, threshold, schedule=schedule, rng=rng, weights=weights)
    raise ConfigurationError(f"unknown protocol tag {tag!r}")


@dataclass
class RunTrace:
    config: RunConfig
    problem: ClusterProblem
    regret: np.ndarray  # (T, V)
    cum_regret: np.ndarray  # (T,)
    comm_round: np.ndarray  # (T,) int
    comm_cum: np.ndarray
    discovered_frac: np.ndarray
    actions: np.ndarray  # (T, V, d)
    rewards: np.ndarray  # (T, V)
    complete_at_decision: np.ndarray  # (T,) rounds fully inside every active state when deciding
    prune_events: list = field(default_factory=list)
    weights: WeightTrace | None = None
    coverage: dict = field(default_factory=dict)
    bound: np.ndarray | None = None
    cluster_regret: np.ndarray | None = None  # (T, K) cumulative
    cluster_bound: np.ndarray | None = None  # (T, K)
    recovery_round: int | None = None
    cross_shares: list = field(default_factory=list)  # (round, agent, partner)
    final_active: tuple | None = None

    @property
    def run_id(self) -> str:
        return f"{self.config.protocol}-s{self.config.seed}"

    @property
    def cross_shares_after_recovery(self) -> int:
        if self.recovery_round is None:
            return 0
        return sum(1 for t, _, _ in self.cross_shares if t > self.recovery_round)


def run_experiment(cfg: RunConfig, out_dir: str | None = None) -> RunTrace:
    problem = make_problem(cfg)
    V, d, T, m = cfg.V, cfg.d, cfg.T, cfg.m
    schedule = DelaySchedule(V, cfg.delay_multiplier, cfg.log_base)
    weights = None
    if cfg.track_weights and cfg.protocol in ("dcb", "dccb"):
        weights = WeightTrace(V, T, labels=problem.labels if problem.n_clusters > 1 else None)
    threshold = ThresholdParams(problem.lam, cfg.delta, cfg.R, d, cfg.threshold_rate)
    proto = make_protocol(cfg.protocol, V, d, schedule=schedule,
                          rng=stream(cfg.seed, TAG_PERMUTATION), weights=weights, threshold=threshold)
    thetas = problem.thetas
    labels = problem.labels
    true_sets = [problem.cluster_of(i) for i in range(V)]

    regret = np.empty((T, V))
    actions = np.empty((T, V, d))
    rewards = np.empty((T, V))
    comm = np.empty(T, dtype=np.int64)
    frac = np.empty(T)
    complete = np.empty(T, dtype=np.int64)
    prunes, cross = [], []
    coverage = {}
    checkpoints = set(cfg.checkpoints)
    recovery = None
    done = 0
    rows = np.arange(V)

    for t in range(1, T + 1):
        complete[t - 1] = done
        ctx = round_contexts(cfg.seed, t, V, m, d)
        idx, theta_hat, radius, _ = select_actions_batched(ctx, proto.active_A, proto.active_b,
                                                           cfg.R, cfg.S, cfg.delta)
        if t in checkpoints:
            diff = theta_hat - thetas
            dist = np.sqrt(np.einsum("vi,vij,vj->v", diff, proto.active_A, diff))
            coverage[t] = dist <= radius
        X = ctx[rows, idx]
        mean = np.einsum("vd,vd->v", X, thetas)
        best = np.einsum("vmd,vd->vm", ctx, thetas).max(axis=1)
        r = mean + cfg.R * round_noise(cfg.seed, t, V)
        regret[t - 1] = np.maximum(best - mean, 0.0)
        actions[t - 1] = X
        rewards[t - 1] = r
        proto.step(t, X, r)
        done = proto.complete_rounds(t)
        comm[t - 1] = comm_bits(cfg.protocol, t, V, d, buffer_length=proto.sent_buffer_length)
        if isinstance(proto, DCCB):
            prunes.extend(proto.last_events)
            sig = proto.last_sigma
            bad = np.flatnonzero(proto.last_share & (sig != rows) & (labels != labels[sig]))
            cross.extend((t, int(i), int(sig[i])) for i in bad)
            sets = proto.neighbor_sets()
            ok = np.array([sets[i] == true_sets[i] for i in range(V)])
            if ok.all():
                if recovery is None:
                    recovery = t
            else:
                recovery = None
        else:
            ok = np.array([frozenset(range(V)) == true_sets[i] for i in range(V)])
        frac[t - 1] = ok.mean()

    cum = np.cumsum(regret.sum(axis=1))
    trace = RunTrace(
        config=cfg, problem=problem, regret=regret, cum_regret=cum, comm_round=comm,
        comm_cum=np.cumsum(comm), discovered_frac=frac, actions=actions, rewards=rewards,
        complete_at_decision=complete, prune_events=prunes, weights=weights, coverage=coverage,
        recovery_round=recovery, cross_shares=cross,
        final_active=(proto.active_A.copy(), proto.active_b.copy()),
    )
    K = problem.n_clusters
    onehot = labels[None, :] == np.arange(K)[:, None]
    trace.cluster_regret = np.cumsum(regret @ onehot.T, axis=0)
    if cfg.emit_bounds:
        attach_bounds(trace)
    if out_dir is not None:
        write_outputs(trace, out_dir)
    return trace


def attach_bounds(trace: RunTrace) -> None:
    """Evaluate the matching closed-form regret bound at every round."""
    cfg, p = trace.config, trace.problem
    V, d, T = cfg.V, cfg.d, cfg.T
    ts = np.arange(1, T + 1)
    tag = cfg.protocol
    if tag == "nosharing":
        b = [bound_nosharing(t, V, d, cfg.delta, cfg.R, cfg.S) for t in ts]
    elif tag == "dcb":
        b = [bound_dcb(t, V, d, cfg.delta, cfg.R, cfg.S) for t in ts]
    elif tag == "dccb":
        C = math.inf if trace.recovery_round is None else trace.recovery_round
        per = np.array([[bound_dccb(t, len(members), d, cfg.delta, cfg.R, cfg.S, C, V=V)
                         for members, _ in p.clusters] for t in ts])
        trace.cluster_bound = per
        b = per.sum(axis=1)
    else:
        delay = np.maximum.accumulate(ts - trace.complete_at_decision)
        b = [bound_delayed(t, V, d, cfg.delta, cfg.R, cfg.S, int(k)) for t, k in zip(ts, delay)]
    trace.bound = np.asarray(b, dtype=float)


# --------------------------------------------------------------------------
# CSV output
# --------------------------------------------------------------------------

def header_lines(trace: RunTrace) -> list[str]:
    cfg = dataclasses.asdict(trace.config)
    return [
        "# config: " + json.dumps(cfg, sort_keys=True),
        "# problem: " + json.dumps(trace.problem.describe(), sort_keys=True),
    ]


def runs_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    for line in header_lines(trace):
        buf.write(line + "\n")
    w = csv.writer(buf, lineterminator="\n")
    cols = RUN_COLUMNS + (["bound_value"] if trace.bound is not None else [])
    w.writerow(cols)
    cfg = trace.config
    for k in range(cfg.T):
        row = [trace.run_id, cfg.protocol, cfg.seed, k + 1, repr(float(trace.cum_regret[k])),
               int(trace.comm_round[k]), int(trace.comm_cum[k]), repr(float(trace.discovered_frac[k]))]
        if trace.bound is not None:
            row.append(repr(float(trace.bound[k])))
        w.writerow(row)
    return buf.getvalue()


def prunes_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PRUNE_COLUMNS)
    for e in trace.prune_events:
        w.writerow([e.round, e.agent_a, e.agent_b, repr(e.distance), repr(e.threshold)])
    return buf.getvalue()


def agents_csv(trace: RunTrace) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round", "agent", "regret", "reward"])
    T, V = trace.regret.shape
    for t in range(T):
        for i in range(V):
            w.writerow([t + 1, i, repr(float(trace.regret[t, i])), repr(float(trace.rewards[t, i]))])
    return buf.getvalue()


def write_outputs(trace: RunTrace, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    stem = os.path.join(out_dir, trace.run_id)
    files = {f"{stem}.runs.csv": runs_csv(trace)}
    if trace.config.protocol == "dccb":
        files[f"{stem}.prunes.csv"] = prunes_csv(trace)
    if trace.config.per_agent:
        files[f"{stem}.agents.csv"] = agents_csv(trace)
    if trace.config.lemma_checks and trace.weights is not None:
        from .lemmas import check_det_weight_bound, check_weight_sum, reports_csv, trace_delay_bias

        reps = [check_weight_sum(trace), check_det_weight_bound(trace), trace_delay_bias(trace)]
        files[f"{stem}.lemmas.csv"] = reports_csv(reps)
    for path, text in files.items():
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    return list(files)
