import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from p2pbandit.errors import InstrumentationError
from p2pbandit.lemmas import (
    LemmaReport,
    check_delay_bias,
    check_det_weight_bound,
    check_outlier_count,
    check_weight_sum,
    delayed_outlier_cap,
    log2_delay_tau,
    outlier_bound,
    random_pd,
    random_sequences,
    reports_csv,
    sequential_norms,
    trace_delay_bias,
    weight_bound_terms,
)
from p2pbandit.simulate import RunConfig, run_experiment


def test_report_counts_and_csv():
    rep = LemmaReport("x")
    rep.add([0.5, -1.0, 0.0])
    rep.add(-1e-12, tol=1e-9)
    assert (rep.trials, rep.violations, rep.worst_slack) == (4, 1, -1.0)
    assert not rep.passed
    text = reports_csv([rep, LemmaReport("y")])
    assert text.splitlines()[0] == "lemma_id,trials,violations,worst_slack"
    assert text.splitlines()[1].startswith("x,4,1,")


def test_sequential_norms_match_direct_solves():
    rng = np.random.default_rng(1)
    B0 = random_pd(rng, 1, 3)[0]
    ys = random_sequences(rng, 1, 30, 3)[0]
    q = sequential_norms(B0, ys)
    B = B0.copy()
    for k, y in enumerate(ys):
        assert q[k] == pytest.approx(y @ np.linalg.solve(B, y), rel=1e-10)
        B += np.outer(y, y)


def test_outlier_bound_example_and_rejections():
    assert outlier_bound(2, 0.5, 2.0) == pytest.approx(2.5 * 2 * 1.5 / 0.25)
    with pytest.raises(ValueError):
        check_outlier_count(np.eye(2), np.ones((3, 2)), 0.5)
    with pytest.raises(ValueError):
        check_outlier_count(np.eye(2), np.zeros((3, 2)), 1.0)


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 4), c=st.floats(0.05, 0.95), seed=st.integers(0, 2 ** 32 - 1),
       shrink=st.booleans())
def test_outlier_count_never_exceeds_bound(d, c, seed, shrink):
    rng = np.random.default_rng(seed)
    B0 = random_pd(rng, 8, d, lo=0.3, hi=3.0)
    ys = random_sequences(rng, 8, 120, d, shrink=shrink)
    assert check_outlier_count(B0, ys, c, plus_one=True).passed


def test_printed_outlier_cap_misses_the_last_outlier():
    # one unit update at B0 = 1 has norm 1 > 0.9, but the printed cap is 0.23
    rep = check_outlier_count(np.eye(1), np.ones((5, 1)), 0.9)
    assert rep.detail["max_count"] == 1
    assert not rep.passed
    assert check_outlier_count(np.eye(1), np.ones((5, 1)), 0.9, plus_one=True).passed
    assert outlier_bound(1, 0.5, 1.0) == pytest.approx(3.0)
    assert outlier_bound(1, 0.5, 0.4, plus_one=True) == 0.0


@settings(max_examples=40, deadline=None)
@given(n=st.integers(0, 12), d=st.integers(1, 4), seed=st.integers(0, 2 ** 32 - 1))
def test_weight_imbalance_inequalities(n, d, seed):
    rng = np.random.default_rng(seed)
    Y = random_sequences(rng, 1, n, d, shrink=True)[0] if n else np.zeros((0, d))
    W = rng.uniform(0.0, 3.0, size=(5, n))
    x = random_sequences(rng, 1, 5, d)[0]
    det_slack, norm_slack = weight_bound_terms(Y, W, x)
    assert np.all(det_slack >= -1e-9)
    assert np.all(norm_slack >= -1e-9)


def test_unit_weights_are_tight():
    rng = np.random.default_rng(3)
    Y = random_sequences(rng, 1, 10, 3)[0]
    ds, ns = weight_bound_terms(Y, np.ones(10), Y[0])
    assert ds[0] == pytest.approx(0.0, abs=1e-12)
    assert ns[0] == pytest.approx(0.0, abs=1e-12)


def test_delay_tau_values():
    assert [log2_delay_tau(t) for t in (1, 2, 16, 100)] == [1, 0, 0, 100 - math.ceil(4 * math.log2(100))]
    assert delayed_outlier_cap(0, 3, 3.0) == 0.0


@settings(max_examples=25, deadline=None)
@given(d=st.integers(1, 4), seed=st.integers(0, 2 ** 32 - 1), lag=st.integers(0, 20))
def test_delay_bias_inequalities_hold(d, seed, lag):
    rng = np.random.default_rng(seed)
    # eigenvalues <= 1 keep tr(B0^{-1}) >= 1, where the outlier cap is nonnegative
    B0 = random_pd(rng, 1, d, lo=0.3, hi=1.0)[0]
    ys = random_sequences(rng, 1, 150, d, shrink=True)[0]
    rep = check_delay_bias(B0, ys, lambda t: max(0, t - lag))
    assert rep.passed, rep


def test_delay_bias_zero_delay_has_no_outliers():
    rng = np.random.default_rng(0)
    ys = random_sequences(rng, 1, 50, 2)[0]
    rep = check_delay_bias(np.eye(2), ys, lambda t: t)
    assert rep.passed and rep.detail["outliers"] == 0


def test_delay_bias_rejects_bad_tau():
    with pytest.raises(ValueError):
        check_delay_bias(np.eye(2), np.zeros((3, 2)), lambda t: t + 1)


def test_instrumented_dcb_trace_checks_pass():
    tr = run_experiment(RunConfig(protocol="dcb", V=3, d=2, T=150, seed=4, track_weights=True))
    assert check_weight_sum(tr).passed
    assert check_det_weight_bound(tr).passed
    assert trace_delay_bias(tr).passed


def test_missing_instrumentation_is_an_error():
    tr = run_experiment(RunConfig(protocol="dcb", V=2, d=2, T=20, seed=0))
    with pytest.raises(InstrumentationError):
        check_weight_sum(tr)
    with pytest.raises(InstrumentationError):
        check_det_weight_bound(tr)


def test_weight_sum_detects_tampering():
    tr = run_experiment(RunConfig(protocol="dcb", V=3, d=2, T=60, seed=1, track_weights=True))
    tr.weights.holder_dev[10] = 1e-3
    assert not check_weight_sum(tr).passed
