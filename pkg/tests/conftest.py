"""Shared fixtures: the multi-seed acceptance runs and the per-criterion summary."""

from collections import defaultdict

import pytest

from p2pbandit.simulate import RunConfig, run_experiment

SEEDS = range(20)
ORDERING_PROTOCOLS = ("instsharing", "dcb", "nosharing")

_outcomes: dict = defaultdict(list)
_details: dict = defaultdict(list)


def ordering_config(protocol: str, seed: int) -> RunConfig:
    return RunConfig(protocol=protocol, V=16, d=5, m=10, T=2000, R=0.5, seed=seed, emit_bounds=True)


def clustering_config(seed: int) -> RunConfig:
    # threshold_rate=1.0: see the README section on the pruning threshold
    return RunConfig(protocol="dccb", V=16, clusters=(8, 8), d=2, gamma=1.0, S=1.0, T=3000,
                     seed=seed, threshold_rate=1.0, emit_bounds=True)


@pytest.fixture(scope="session")
def ordering_runs():
    return {p: [run_experiment(ordering_config(p, s)) for s in SEEDS] for p in ORDERING_PROTOCOLS}


@pytest.fixture(scope="session")
def clustering_runs():
    return [run_experiment(clustering_config(s)) for s in SEEDS]


@pytest.fixture
def report(request):
    """report(text): attach a measured value to this test's criterion summary line."""
    marker = request.node.get_closest_marker("acceptance")

    def _report(text: str) -> None:
        line = f"criterion {marker.args[0]}: {text}"
        print(line)
        _details[marker.args[0]].append(text)

    return _report


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        _outcomes[marker.args[0]].append(rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_outcomes):
        status = "PASS" if all(_outcomes[k]) else "FAIL"
        detail = "; ".join(_details.get(k, []))
        terminalreporter.write_line(f"criterion {k}: {status}  {detail}")
