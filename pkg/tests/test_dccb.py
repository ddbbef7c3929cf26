import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2pbandit.dccb import (
    DCCB,
    ThresholdParams,
    a_lambda,
    dccb_round,
    dccb_round_states,
    draw_neighbour_permutation,
    prune_and_reset,
    should_prune,
    threshold,
)
from p2pbandit.errors import ConfigurationError
from p2pbandit.linalg import PsdAccumulator
from p2pbandit.policy import PolicyState
from p2pbandit.protocols import AgentState, DelaySchedule, Gossip, ShareBuffer, WeightTrace, draw_permutation


def unit_rows(rng, n, d):
    X = rng.standard_normal((n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


NEVER = ThresholdParams(lam=0.5, delta=0.1, R=0.5, d=2, rate=1e-9)  # threshold stays above 2


# ---------------------------------------------------------------- threshold

def test_a_lambda_is_negative_early():
    assert a_lambda(5, 0.1, 0.01) < 0


def test_a_lambda_delta_one_limit():
    lam = 0.3
    expected = lam - 8 * math.log(4) - 2 * math.sqrt(math.log(4))
    assert a_lambda(1, 1.0, lam) == pytest.approx(expected)
    assert expected == pytest.approx(lam - 11.09 - 2.355, abs=2e-3)


def test_a_lambda_eventually_increasing():
    vals = [a_lambda(t, 0.1, 0.5) for t in range(10, 5000, 10)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_threshold_examples():
    # log term vanishes at t = 1 with delta = 2, and A_lambda is clamped
    assert threshold(1, R=3.0, d=4, delta=2.0, lam=0.1) == pytest.approx(1.0)
    assert threshold(1, R=1.0, d=1, delta=0.5, lam=0.1) == pytest.approx(math.sqrt(2 * math.log(4)) + 1)
    assert threshold(1, R=1.0, d=1, delta=0.5, lam=0.1) == pytest.approx(2.665, abs=1e-3)


def test_threshold_vanishes():
    p = ThresholdParams(lam=0.5, delta=0.1, R=0.5, d=2)
    grid = [p(t) for t in (10, 100, 1_000, 10_000, 100_000)]
    assert all(a > b for a, b in zip(grid, grid[1:]))
    assert grid[-1] < 0.01


def test_rate_override_replaces_leading_factor():
    t, delta, lam = 700, 0.02, 0.4
    assert a_lambda(t, delta, lam, rate=1 / delta) == pytest.approx(a_lambda(t, delta, lam))
    assert a_lambda(t, delta, lam, rate=1.0) < a_lambda(t, delta, lam)


def test_threshold_params_validation():
    for bad in (dict(lam=0.0), dict(delta=1.0), dict(rate=-1.0)):
        kw = dict(lam=0.5, delta=0.1, R=0.5, d=2)
        kw.update(bad)
        with pytest.raises(ConfigurationError):
            ThresholdParams(**kw)


def test_prune_rule_is_strict():
    assert should_prune([3.0, 0.0], [0.0, 0.0], 2.5)
    assert not should_prune([0.2, 0.1], [0.2, 0.1], 1e-9)
    assert not should_prune([3.0, 0.0], [0.0, 0.0], 3.0)


# -------------------------------------------------------------------- reset

def _agent(rng, i, V, d, L):
    Xs = unit_rows(rng, 5, d)
    A = np.eye(d) + Xs.T @ Xs
    b = rng.standard_normal(d)
    buf = ShareBuffer([(np.eye(d) * k, np.ones(d) * k) for k in range(1, L + 1)])
    return AgentState(PolicyState(PsdAccumulator(3 * A), 2 * b), buf,
                      PolicyState(PsdAccumulator(A), b), frozenset(range(V)))


def test_prune_and_reset_falls_back_to_own_data():
    rng = np.random.default_rng(0)
    a, b = _agent(rng, 0, 4, 3, 5), _agent(rng, 2, 4, 3, 5)
    a2, b2 = prune_and_reset(a, b, 0, 2, 5)
    for old, new, other in ((a, a2, 2), (b, b2, 0)):
        assert np.array_equal(new.active.A.solve(new.active.b), new.local.A.solve(new.local.b))
        assert len(new.neighbors) == len(old.neighbors) - 1 and other not in new.neighbors
        assert len(new.buffer) == 5
        for m, v in new.buffer.entries[:-1]:
            assert not m.any() and not v.any()
        m, v = new.buffer.entries[-1]
        assert np.array_equal(m, old.local.A.matrix - np.eye(3))
        assert np.array_equal(v, old.local.b)


def test_pruning_last_neighbour_leaves_singleton():
    rng = np.random.default_rng(1)
    a = _agent(rng, 0, 2, 2, 1)
    b = _agent(rng, 1, 2, 2, 1)
    a = AgentState(a.active, a.buffer, a.local, frozenset({0, 1}))
    b = AgentState(b.active, b.buffer, b.local, frozenset({0, 1}))
    a2, b2 = prune_and_reset(a, b, 0, 1, 1)
    assert a2.neighbors == {0} and b2.neighbors == {1}


# ------------------------------------------------------------- permutations

@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 9), st.floats(0.0, 1.0))
def test_neighbour_permutation_stays_inside_neighbour_sets(seed, V, density):
    rng = np.random.default_rng(seed)
    N = np.eye(V, dtype=bool)
    upper = np.triu(rng.random((V, V)) < density, 1)
    N |= upper | upper.T
    sigma = draw_neighbour_permutation(rng, N)
    assert sorted(sigma.tolist()) == list(range(V))
    assert all(N[i, sigma[i]] for i in range(V))


def test_full_neighbourhood_consumes_the_same_draws_as_gossip():
    N = np.ones((6, 6), dtype=bool)
    a = draw_neighbour_permutation(np.random.default_rng(5), N)
    b = draw_permutation(np.random.default_rng(5), [np.arange(6)])
    assert np.array_equal(a, b)


def test_clique_components_get_uniform_permutations():
    N = np.zeros((4, 4), dtype=bool)
    N[:2, :2] = N[2:, 2:] = True
    rng = np.random.default_rng(2)
    n = 4000
    swaps = 0
    for _ in range(n):
        s = draw_neighbour_permutation(rng, N)
        assert set(s[:2]) == {0, 1} and set(s[2:]) == {2, 3}
        swaps += s[0] == 1
    assert abs(swaps - n / 2) <= 3 * math.sqrt(n / 4)


def test_partial_neighbourhoods_let_different_sets_meet():
    # agent 0 already cut 2; 1 still sees everybody
    N = np.ones((3, 3), dtype=bool)
    N[0, 2] = N[2, 0] = False
    rng = np.random.default_rng(3)
    pairs = {(i, int(s[i])) for s in (draw_neighbour_permutation(rng, N) for _ in range(200)) for i in range(3)}
    assert (0, 1) in pairs and (1, 2) in pairs
    assert (0, 2) not in pairs and (2, 0) not in pairs


# --------------------------------------------------------------- the round

def test_no_prunes_reproduces_gossip_exactly():
    rng = np.random.default_rng(4)
    V, d = 6, 2
    c = DCCB(V, d, NEVER, rng=np.random.default_rng(9))
    g = Gossip(V, d, rng=np.random.default_rng(9))
    for t in range(1, 120):
        X, r = unit_rows(rng, V, d), rng.standard_normal(V)
        assert c.step(t, X, r) == []
        g.step(t, X, r)
        assert np.array_equal(c.active_A, g.active_A) and np.array_equal(c.active_b, g.active_b)


def test_far_apart_agents_prune_on_first_contact():
    V, d = 2, 1
    p = ThresholdParams(lam=1.0, delta=0.1, R=0.0, d=1, rate=1e6)  # threshold tiny from the start
    net = DCCB(V, d, p, rng=np.random.default_rng(0))
    X = np.ones((2, 1))
    r = np.array([10.0, -10.0])  # local estimates 5 and -5
    events = dccb_round(net, np.array([1, 0]), X, r, 2)
    assert len(events) == 1
    e = events[0]
    assert (e.agent_a, e.agent_b) == (0, 1) and e.distance == pytest.approx(10.0)
    assert e.distance >= e.threshold
    assert net.neighbor_sets() == [frozenset({0}), frozenset({1})]
    # reset: active equals local
    assert np.array_equal(net.active_A, net.local_A) and np.array_equal(net.active_b, net.local_b)


def test_close_agents_with_different_sets_only_append():
    V, d = 3, 1
    net = DCCB(V, d, NEVER, schedule=DelaySchedule(V, multiplier=50), rng=np.random.default_rng(0))
    net.neighbors[0, 2] = net.neighbors[2, 0] = False
    X = np.ones((3, 1))
    net.round(1, np.arange(3), X, np.zeros(3))
    before = net.buf_A[:, 0].copy()
    net.round(2, np.array([1, 0, 2]), X, np.zeros(3))
    # 0 and 1 differ in their sets: first slot untouched
    assert np.array_equal(net.buf_A[:, 0], before)
    assert not net.last_share[0] and not net.last_share[1]
    # appends are scaled by the neighbour count
    assert net.buf_A[0, 1, 0, 0] == 2.0 and net.buf_A[1, 1, 0, 0] == 3.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 6), st.floats(0.05, 3.0))
def test_stacked_dccb_matches_per_agent_reference(seed, V, c):
    rng = np.random.default_rng(seed)
    d = 2
    sched = DelaySchedule(V, multiplier=1.0)
    params = ThresholdParams(lam=0.5, delta=0.1, R=0.5, d=d)
    net = DCCB(V, d, params, schedule=sched)
    net.params = lambda t: c  # fixed threshold for the comparison
    states = [AgentState.initial(i, V, d) for i in range(V)]
    thetas = rng.standard_normal((V, d))
    for t in range(1, 25):
        sigma = draw_neighbour_permutation(rng, net.neighbors)
        X = unit_rows(rng, V, d)
        r = np.einsum("vd,vd->v", X, thetas) + 0.3 * rng.standard_normal(V)
        dccb_round(net, sigma, X, r, t)
        states = dccb_round_states(states, sigma, X, r, t, sched, c)
        for i, s in enumerate(states):
            assert s.neighbors == net.neighbor_sets()[i]
            assert np.allclose(net.active_A[i], s.active.A.matrix, rtol=1e-10, atol=1e-10)
            assert np.allclose(net.active_b[i], s.active.b, rtol=1e-10, atol=1e-10)
            assert np.allclose(net.local_A[i], s.local.A.matrix)
            assert len(s.buffer) == net.length
            for k, (m, v) in enumerate(s.buffer.entries):
                assert np.allclose(net.buf_A[i, k], m, atol=1e-10)
                assert np.allclose(net.buf_b[i, k], v, atol=1e-10)


def test_neighbour_sets_only_shrink_and_keep_self():
    rng = np.random.default_rng(6)
    V, d = 8, 2
    p = ThresholdParams(lam=0.5, delta=0.1, R=0.5, d=d, rate=1.0)
    thetas = np.repeat(np.array([[1.0, 0.0], [-1.0, 0.0]]), 4, axis=0)
    net = DCCB(V, d, p, rng=np.random.default_rng(1))
    prev = net.neighbors.copy()
    for t in range(1, 400):
        X = unit_rows(rng, V, d)
        net.step(t, X, np.einsum("vd,vd->v", X, thetas) + 0.5 * rng.standard_normal(V))
        assert np.all(net.neighbors <= prev)
        assert np.all(np.diag(net.neighbors))
        assert np.array_equal(net.neighbors, net.neighbors.T)
        prev = net.neighbors.copy()


def test_reset_is_visible_in_the_weight_trace():
    V, d = 2, 1
    wt = WeightTrace(V, 3)
    p = ThresholdParams(lam=1.0, delta=0.1, R=0.0, d=1, rate=1e6)
    net = DCCB(V, d, p, schedule=DelaySchedule(V, multiplier=50), rng=np.random.default_rng(0), weights=wt)
    X = np.ones((2, 1))
    net.round(1, np.array([0, 1]), X, np.array([1.0, -1.0]))
    net.round(2, np.array([1, 0]), X, np.array([1.0, -1.0]))
    # after the reset each agent carries weight 1 on its own two data, nothing foreign
    own0 = np.zeros(wt.N)
    own0[[wt.key(0, 1), wt.key(0, 2)]] = 1.0
    total0 = wt.active[0] + wt.buffer[0, : wt.length].sum(axis=0)
    assert np.array_equal(wt.active[0], own0)
    assert np.array_equal(total0, 2 * own0)  # active plus the padded payload slot
    assert net.length == wt.length
