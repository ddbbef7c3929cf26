"""Numerical checks of the matrix and weight inequalities behind the regret analysis.

Every check returns a LemmaReport. Slacks are measured in log space where
the inequality is multiplicative (log bound minus log observed), and
directly otherwise; a negative worst slack means at least one violation.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InstrumentationError

_REL_TOL = 1e-9


@dataclass
class LemmaReport:
    lemma_id: str
    trials: int = 0
    violations: int = 0
    worst_slack: float = math.inf
    detail: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.violations == 0

    def add(self, slack, tol: float = 0.0) -> None:
        """Record one or many slacks; slack < -tol counts as a violation."""
        s = np.atleast_1d(np.asarray(slack, dtype=float))
        if s.size == 0:
            return
        self.trials += int(s.size)
        self.violations += int(np.sum(s < -tol))
        self.worst_slack = min(self.worst_slack, float(s.min()))

    def merge(self, other: "LemmaReport") -> "LemmaReport":
        self.trials += other.trials
        self.violations += other.violations
        self.worst_slack = min(self.worst_slack, other.worst_slack)
        for k, v in other.detail.items():
            self.detail.setdefault(k, v)
        return self

    def row(self) -> list:
        return [self.lemma_id, self.trials, self.violations, repr(self.worst_slack)]


def reports_csv(reports) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["lemma_id", "trials", "violations", "worst_slack"])
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


# --------------------------------------------------------------------------
# weight imbalance: determinant and norm versus perfectly pooled data
# --------------------------------------------------------------------------

def weight_bound_terms(Y: np.ndarray, w: np.ndarray, x: np.ndarray):
    """Both sides (log scale) of the weight-imbalance inequalities.

    Y: (n, d) data vectors; w: (n,) or (k, n) weights; x: (d,) or (k, d).
    Weighted matrix I + sum w y y^T against pooled I + sum y y^T, factor
    exp(sum |w - 1|). Returns (det_slack, norm_slack) in log space, one
    entry per weight row.
    """
    Y = np.asarray(Y, dtype=float)
    W = np.atleast_2d(np.asarray(w, dtype=float))
    X = np.atleast_2d(np.asarray(x, dtype=float))
    d = Y.shape[1] if Y.ndim == 2 and Y.shape[0] else X.shape[1]
    eye = np.eye(d)
    pooled = eye + Y.T @ Y
    weighted = eye + np.einsum("kn,ni,nj->kij", W, Y, Y) if Y.size else np.tile(eye, (len(W), 1, 1))
    excess = np.abs(W - 1.0).sum(axis=1) if W.shape[1] else np.zeros(len(W))
    _, ld_pool = np.linalg.slogdet(pooled)
    _, ld_w = np.linalg.slogdet(weighted)
    det_slack = excess + ld_pool - ld_w
    n_pool = np.einsum("ki,ki->k", X, np.linalg.solve(pooled, X.T).T)
    n_w = np.einsum("ki,ki->k", X, np.linalg.solve(weighted, X[:, :, None])[:, :, 0])
    with np.errstate(divide="ignore"):
        norm_slack = np.where(n_w > 0, excess + np.log(np.maximum(n_pool, 1e-300)) - np.log(np.maximum(n_w, 1e-300)), 0.0)
    return det_slack, norm_slack


def check_det_weight_bound(trace) -> LemmaReport:
    """Weighted active matrices against the pooled matrix of the same rounds.

    ``trace`` needs ``weights`` (a WeightTrace with snapshots) and
    ``actions`` (T, V, d). Checked at every snapshot round s < T, for the
    action each agent plays at round s + 1.
    """
    wt = getattr(trace, "weights", None)
    if wt is None:
        raise InstrumentationError("weight tracking was not enabled for this run")
    actions = np.asarray(trace.actions)
    T, V, d = actions.shape
    rep = LemmaReport("det-weight")
    for s, coeffs in sorted(wt.snapshots.items()):
        if s >= T:
            continue
        f = 0 if s == 0 else wt.flushed_at[s - 1]
        n = f * V
        Y = actions[:f].reshape(n, d)
        ds, ns = weight_bound_terms(Y, coeffs[:, :n], actions[s])
        tol = _REL_TOL * (1.0 + np.abs(ds).max())
        rep.add(ds, tol)
        rep.add(ns, tol)
    return rep


# --------------------------------------------------------------------------
# outlier counting for a sequence of unit updates
# --------------------------------------------------------------------------

def outlier_bound(d: int, c: float, trace_inv_B0, plus_one: bool = False):
    """(d + c) d (tr(B0^{-1}) - c) / c^2.

    With ``plus_one`` the cap that the trace-decrease argument actually
    yields: every outlier needs tr(B_{k-1}^{-1}) > c beforehand, so the last
    one is free; zero when tr(B0^{-1}) <= c.
    """
    tr = np.asarray(trace_inv_B0, dtype=float)
    cap = (d + c) * d * (tr - c) / (c * c)
    if plus_one:
        cap = np.where(tr > c, cap + 1.0, 0.0)
    return cap if cap.ndim else float(cap)


def sequential_norms(B0: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """||y_k||^2 in B_{k-1}^{-1} for batched sequences.

    B0: (n, d, d) or (d, d); ys: (n, L, d) or (L, d). Uses Sherman-Morrison
    on the inverse; returns (n, L) or (L,).
    """
    single = np.ndim(ys) == 2
    ys = np.asarray(ys, dtype=float)
    if single:
        ys = ys[None]
    n, L, d = ys.shape
    Binv = np.linalg.inv(np.broadcast_to(np.asarray(B0, dtype=float), (n, d, d))).copy()
    out = np.empty((n, L))
    for k in range(L):
        y = ys[:, k]
        u = np.einsum("nij,nj->ni", Binv, y)
        q = np.einsum("ni,ni->n", y, u)
        out[:, k] = q
        Binv -= u[:, :, None] * u[:, None, :] / (1.0 + q)[:, None, None]
    return out[0] if single else out


def check_outlier_count(B0, ys, c: float, plus_one: bool = False) -> LemmaReport:
    """Number of k with ||y_k||^2_{B_{k-1}^{-1}} > c against its closed-form cap."""
    if not 0 < c < 1:
        raise ValueError("c must lie in (0, 1)")
    B0 = np.asarray(B0, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if np.any(np.linalg.norm(ys, axis=-1) > 1 + 1e-12):
        raise ValueError("sequence vectors must have norm <= 1")
    q = sequential_norms(B0, ys)
    counts = np.atleast_1d((q > c).sum(axis=-1))
    tr = np.atleast_1d(np.trace(np.linalg.inv(B0), axis1=-2, axis2=-1))
    d = ys.shape[-1]
    bounds = outlier_bound(d, c, tr, plus_one)
    rep = LemmaReport("outlier-count")
    rep.add(bounds - counts)
    rep.detail["max_count"] = int(counts.max())
    return rep


def random_pd(rng: np.random.Generator, n: int, d: int, lo: float = 0.5, hi: float = 2.0) -> np.ndarray:
    """n random symmetric matrices with eigenvalues uniform in [lo, hi]."""
    Q, _ = np.linalg.qr(rng.standard_normal((n, d, d)))
    ev = rng.uniform(lo, hi, size=(n, d))
    return np.einsum("nij,nj,nkj->nik", Q, ev, Q)


def random_sequences(rng: np.random.Generator, n: int, L: int, d: int, shrink: bool = False) -> np.ndarray:
    z = rng.standard_normal((n, L, d))
    z /= np.linalg.norm(z, axis=-1, keepdims=True)
    if shrink:
        z *= rng.uniform(0.0, 1.0, size=(n, L, 1))
    return z


def outlier_suite(trials: int = 1000, dims=(2, 5), cs=(0.1, 0.5, 0.9), length: int = 200,
                  seed: int = 0) -> LemmaReport:
    """Random trials over (d, c): identity and random starts, unit and shrunk vectors."""
    rng = np.random.default_rng([seed, 6])
    rep = LemmaReport("outlier-count")
    for d in dims:
        for c in cs:
            quarter = [trials // 4 + (1 if k < trials % 4 else 0) for k in range(4)]
            for k, n in enumerate(quarter):
                if n == 0:
                    continue
                B0 = np.tile(np.eye(d), (n, 1, 1)) if k % 2 == 0 else random_pd(rng, n, d)
                ys = random_sequences(rng, n, length, d, shrink=k >= 2)
                rep.merge(check_outlier_count(B0, ys, c))
    return rep


# --------------------------------------------------------------------------
# delayed statistics
# --------------------------------------------------------------------------

def delayed_outlier_cap(Delta: int, d: int, trace_inv_B0: float) -> float:
    """Delta^3 (d + 1/Delta) d (tr(B0^{-1}) - 1/Delta), or 0 without delay."""
    if Delta <= 0:
        return 0.0
    return Delta ** 3 * (d + 1.0 / Delta) * d * (trace_inv_B0 - 1.0 / Delta)


def check_delay_bias(B0, ys, tau, outlier_cap: float | None = None) -> LemmaReport:
    """Stale statistics B_tau(t) against current B_t along one sequence.

    Checks, for every t, with S(t) = sum_{k=tau(t)+1}^t ||y_k||^2_{B_{k-1}^{-1}}:
        det B_tau(t) <= exp(S(t)) det B_t
        ||y_t||^2_{B_tau(t)^{-1}} <= exp(S(t)) ||y_t||^2_{B_t^{-1}}
    and that the number of rounds whose stale norm or stale determinant is
    off by a factor >= e stays below ``outlier_cap`` (default: the cap for
    the largest delay seen).

    tau: callable t -> int in [0, t], or an integer array indexed from t=1.
    """
    B0 = np.asarray(B0, dtype=float)
    ys = np.asarray(ys, dtype=float)
    L, d = ys.shape
    taus = np.array([int(tau(t)) for t in range(1, L + 1)]) if callable(tau) else np.asarray(tau, dtype=int)
    if taus.shape != (L,) or np.any(taus < 0) or np.any(taus > np.arange(1, L + 1)):
        raise ValueError("tau(t) must lie in [0, t]")
    Bs = np.empty((L + 1, d, d))
    Bs[0] = B0
    Bs[1:] = B0 + np.cumsum(ys[:, :, None] * ys[:, None, :], axis=0)
    _, logdet = np.linalg.slogdet(Bs)
    q = sequential_norms(B0, ys)  # ||y_k||^2 in B_{k-1}^{-1}, k = 1..L
    Q = np.concatenate([[0.0], np.cumsum(q)])
    t = np.arange(1, L + 1)
    S = Q[t] - Q[taus]
    rep = LemmaReport("delay-bias")
    det_slack = S + logdet[t] - logdet[taus]
    stale = np.einsum("ki,ki->k", ys, np.linalg.solve(Bs[taus], ys[:, :, None])[:, :, 0])
    fresh = np.einsum("ki,ki->k", ys, np.linalg.solve(Bs[t], ys[:, :, None])[:, :, 0])
    pos = stale > 0
    norm_slack = np.where(pos, S + np.log(np.where(pos, fresh, 1.0)) - np.log(np.where(pos, stale, 1.0)), 0.0)
    rep.add(det_slack, _REL_TOL * (1 + np.abs(logdet).max()))
    rep.add(norm_slack, _REL_TOL * (1 + np.abs(logdet).max()))

    prev = np.einsum("ki,ki->k", ys, np.linalg.solve(Bs[t - 1], ys[:, :, None])[:, :, 0])
    outliers = (stale >= math.e * prev) | (logdet[t - 1] - logdet[taus] >= 1.0)
    count = int(outliers.sum())
    if outlier_cap is None:
        outlier_cap = delayed_outlier_cap(int(np.max(t - taus)), d, float(np.trace(np.linalg.inv(B0))))
    rep.detail.update(outliers=count, outlier_cap=outlier_cap)
    rep.add(outlier_cap - count)
    return rep


def log2_delay_tau(t: int) -> int:
    """t - ceil(4 log2 t), clamped to 0."""
    return max(0, t - math.ceil(4.0 * math.log2(t) - 1e-9))


def delay_bias_suite(trials: int = 200, length: int = 500, dims=(2, 5), seed: int = 0) -> LemmaReport:
    rng = np.random.default_rng([seed, 7])
    rep = LemmaReport("delay-bias")
    for k in range(trials):
        d = dims[k % len(dims)]
        B0 = np.eye(d) if k % 2 == 0 else random_pd(rng, 1, d)[0]
        ys = random_sequences(rng, 1, length, d, shrink=k % 4 >= 2)[0]
        rep.merge(check_delay_bias(B0, ys, log2_delay_tau))
    return rep


def trace_delay_bias(trace, V: int | None = None) -> LemmaReport:
    """Delay-bias check on a run: the pooled action sequence in (round, agent) order.

    The stale index of datum (t, i) is the number of data in every agent's
    active state when round t was decided; the outlier cap is the
    network-level count (4 V ln(V^{3/2} t))^3 (d+1) d (tr(A0) + 1).
    """
    actions = np.asarray(trace.actions)
    T, V, d = actions.shape
    f = np.asarray(trace.complete_at_decision, dtype=int)
    ys = actions.reshape(T * V, d)
    taus = np.repeat(f * V, V)
    cap = (4 * V * math.log(V ** 1.5 * T)) ** 3 * (d + 1) * d * (d + 1) if V > 1 else None
    return check_delay_bias(np.eye(d), ys, taus, outlier_cap=cap)


# --------------------------------------------------------------------------
# confidence-ball coverage and weight sums
# --------------------------------------------------------------------------

def coverage_tolerance(delta: float, runs: int) -> float:
    return 3.0 * math.sqrt(delta * (1.0 - delta) / runs)


def check_coverage(config, checkpoints=(50, 200), runs: int = 200) -> LemmaReport:
    """Fraction of (run, checkpoint, agent) triples whose confidence ball holds the truth."""
    from .simulate import run_experiment

    if runs < 1:
        raise ValueError("runs must be >= 1")
    cps = tuple(sorted(set(int(c) for c in checkpoints)))
    hits = total = 0
    for k in range(runs):
        cfg = config.replace(seed=config.seed + k, checkpoints=cps, T=max(cps))
        tr = run_experiment(cfg)
        for c in cps:
            hits += int(tr.coverage[c].sum())
            total += tr.coverage[c].size
    frac = hits / total
    need = 1.0 - config.delta - coverage_tolerance(config.delta, runs)
    rep = LemmaReport("coverage", detail={"coverage": frac, "required": need})
    rep.trials = total
    rep.worst_slack = frac - need
    rep.violations = int(frac < need)
    return rep


def check_weight_sum(trace, tol: float = 1e-9) -> LemmaReport:
    """Per-datum weight sums, nonnegativity, and zero foreign weight after cluster recovery.

    Sums are checked for conserving protocols (no pruning events); DCCB
    traces are checked for nonnegativity and for the post-recovery rule.
    """
    wt = getattr(trace, "weights", None)
    if wt is None:
        raise InstrumentationError("weight tracking was not enabled for this run")
    V = wt.V
    rep = LemmaReport("weight-sum")
    conserving = not getattr(trace, "prune_events", None)
    if conserving:
        rep.add(tol * V - np.asarray(wt.holder_dev))
        rep.add(tol * V - np.asarray(wt.source_dev))
    rep.add(np.asarray(wt.min_weight), 1e-12 * V)
    rec = getattr(trace, "recovery_round", None)
    if wt.cross_mass and rec is not None:
        after = np.asarray(wt.cross_mass[rec - 1:])
        rep.add(-after.max(axis=1))
        rep.detail["cross_mass_after_recovery"] = float(after.max())
    return rep
