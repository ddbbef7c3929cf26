"""Regret and communication accounting, and closed-form regret bounds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .protocols import TAGS, DelaySchedule


@dataclass(frozen=True)
class RoundMetrics:
    round: int
    regret: np.ndarray  # per agent
    cum_regret: float
    comm_bits_round: int
    comm_bits_cum: int


def instantaneous_regret(contexts, theta, chosen, atol: float = 1e-12) -> float:
    """Best expected reward in the set minus the chosen action's expected reward."""
    X = np.atleast_2d(np.asarray(contexts, dtype=float))
    chosen = np.asarray(chosen, dtype=float)
    if not np.any(np.all(np.abs(X - chosen) <= atol, axis=1)):
        raise ValueError("chosen action is not in the context set")
    values = X @ np.asarray(theta, dtype=float)
    return float(max(values.max() - chosen @ theta, 0.0))


def comm_bits(tag: str, t: int, V: int, d: int, scalar_bits: int = 64,
              buffer_length: int | None = None, schedule: DelaySchedule | None = None) -> int:
    """Bits sent over the whole network in round t.

    For gossip protocols ``buffer_length`` is the number of buffer entries
    each agent transmits; by default the length held at the start of round t
    under the given (or default) delay schedule.
    """
    if tag not in TAGS:
        raise ConfigurationError(f"unknown protocol tag {tag!r}")
    if t < 1:
        raise ValueError("rounds start at 1")
    if tag == "nosharing":
        return 0
    if tag in ("instsharing", "delayed"):
        return V * (V - 1) * (d + 1) * scalar_bits
    if tag == "roundrobin":
        return V * V * (d + 1) * scalar_bits
    if buffer_length is None:
        schedule = schedule or DelaySchedule(V)
        buffer_length = 0 if t == 1 else min(t - 1, schedule.budget(t - 1))
    bits = V * int(buffer_length) * (d * d + d) * scalar_bits
    if tag == "dccb":
        bits += V * d * scalar_bits
    return bits


# --------------------------------------------------------------------------
# bound ingredients
# --------------------------------------------------------------------------

def mixing_constant(delta: float) -> float:
    """sqrt(3) / ((1 - 2^{-1/4}) sqrt(delta))."""
    return math.sqrt(3.0) / ((1.0 - 2.0 ** -0.25) * math.sqrt(delta))


def delay_penalty(V: float, d: int, t: float) -> float:
    """(d+1) d^2 (4 V ln(V^{3/2} t))^3."""
    return (d + 1) * d * d * (4.0 * V * math.log(V ** 1.5 * t)) ** 3


def _log_det_proxy(n: float, d: int) -> float:
    """ln((1 + n/d)^d), the identity-start upper bound on the log-det ratio after n unit updates."""
    return d * math.log1p(n / d)


def confidence_width(t: float, V: int, d: int, delta: float, R: float, S: float) -> float:
    """R sqrt(ln((1 + V t/d)^d / delta)) + S."""
    return R * math.sqrt(_log_det_proxy(V * t, d) - math.log(delta)) + S


def bound_dcb(t, V, d, delta, R, S) -> float:
    beta = confidence_width(t, V, d, delta, R, S)
    lead = (mixing_constant(delta) * V + delay_penalty(V, d, t)) * S
    return lead + 4.0 * math.e ** 2 * (beta + 4.0 * R) * math.sqrt(V * t * _log_det_proxy(V * t, d))


def bound_nosharing(t, V, d, delta, R, S) -> float:
    beta = confidence_width(t, 1, d, delta, R, S)
    return V * beta * math.sqrt(t * _log_det_proxy(t, d))


def delayed_penalty(Delta: float, d: int, trace_inv_A0: float | None = None) -> float:
    """Delta^3 (d + 1/Delta) d (tr(A0^{-1}) - 1/Delta); zero without delay."""
    if Delta <= 0:
        return 0.0
    tr = float(d) if trace_inv_A0 is None else trace_inv_A0
    return Delta ** 3 * (d + 1.0 / Delta) * d * (tr - 1.0 / Delta)


def bound_delayed(t, V, d, delta, R, S, delay, logdet_ratio: float | None = None) -> float:
    """Regret bound for sharing with bounded delay.

    ``delay`` is max_k (k - tau(k)). With ``logdet_ratio`` (the measured
    ln det(A_t)/det(A_0) of the pooled matrix) the bound is trace-exact;
    otherwise the identity-start proxy is used.
    """
    if delay < 0:
        raise ValueError("delay must be >= 0")
    L = _log_det_proxy(V * t, d) if logdet_ratio is None else float(logdet_ratio)
    beta = R * math.sqrt(max(L - 2.0 * math.log(delta), 0.0)) + S
    main = math.sqrt(math.e) * (beta + R * math.sqrt(2.0)) * math.sqrt(V * t * max(L, 0.0))
    return main + delayed_penalty(V * delay, d) * S


def discovery_term(delta: float, V: int, C: float) -> float:
    """max{sqrt(2) N(delta), C + 4 log2(V^{3/2} C)}."""
    first = math.sqrt(2.0) * mixing_constant(delta)
    second = C + 4.0 * math.log2(V ** 1.5 * C) if C > 0 else -math.inf
    return max(first, second)


def bound_dccb(t, cluster_size, d, delta, R, S, C_discovery, V: int | None = None) -> float:
    """Regret bound for one cluster once neighbour sets settle at round C_discovery.

    ``V`` is the network size entering the discovery term (defaults to the
    cluster size).
    """
    U = cluster_size
    V = U if V is None else V
    if math.isinf(C_discovery):
        return math.inf
    L = _log_det_proxy(U * t, d)
    beta = R * math.sqrt(2.0 * L) + S
    lead = (discovery_term(delta, V, C_discovery) * U + delay_penalty(U, d, t)) * S
    return lead + 4.0 * math.e * (beta + 3.0 * R) * math.sqrt(U * t * L)
