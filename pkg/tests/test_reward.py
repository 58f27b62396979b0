"""Reward backends: least-squares fit against a target operator, and the
external-command protocol."""
from __future__ import annotations

import sys

import pytest

from opsmith.pgraph import parse_steps
from opsmith.reward import (
    RewardReport,
    builtin_fit_reward,
    external_reward,
    fit_target,
    make_reward_fn,
)
from opsmith.search import RewardFailure

from conftest import CONV_STEPS, build_spec


def small_conv_spec(**kw):
    return build_spec(
        "conv2d",
        ("C_out", "C_in", "H", "W"),
        ("K",),
        {"C_out": 3, "C_in": 2, "H": 5, "W": 5, "K": 3},
        ("C_out", "H", "W"),
        ("C_in", "H", "W"),
        **kw,
    )


PARTIAL_CONV = (
    "op{reduce(C_in); reduce(K); contract[0:weight,3:both,4:both]; unfold[1,6]}"
)


@pytest.fixture(scope="module")
def conv_target():
    return fit_target(small_conv_spec(), CONV_STEPS, seed=0, samples=2)


def test_target_fits_itself(conv_target):
    graph = parse_steps(CONV_STEPS, small_conv_spec())
    report = builtin_fit_reward(graph, conv_target, seed=0)
    assert report.reward >= 0.99
    assert float(report.diag("residual")) < 1e-8


def test_fit_reward_is_deterministic(conv_target):
    graph = parse_steps(PARTIAL_CONV, small_conv_spec())
    first = builtin_fit_reward(graph, conv_target, seed=3)
    second = builtin_fit_reward(graph, conv_target, seed=3)
    assert first.reward == second.reward
    assert first.diagnostics == second.diagnostics


def test_partial_operator_lands_strictly_between(conv_target):
    graph = parse_steps(PARTIAL_CONV, small_conv_spec())
    report = builtin_fit_reward(graph, conv_target, seed=0)
    assert 0.0 < report.reward < 0.99
    assert report.reward == pytest.approx(0.599, abs=0.05)


def test_weightless_operator_skips_the_fit(conv_target):
    spec = small_conv_spec()
    graph = parse_steps(
        "op{reduce(C_in); reduce(K); reduce(K); contract[0,3:both,4:both,5:both];"
        " unfold[1,6]; unfold[2,7]}",
        spec,
    )
    assert not graph.weights
    report = builtin_fit_reward(graph, conv_target, seed=0)
    assert 0.0 <= report.reward < 0.9
    assert report.diag("weights") == "0"


def test_reward_stays_in_unit_interval(conv_target):
    graph = parse_steps(CONV_STEPS, small_conv_spec())
    report = builtin_fit_reward(graph, conv_target, seed=0)
    assert 0.0 <= report.reward <= 1.0


STUB_OK = (
    "import sys; sys.stdin.read();"
    " print('reward 0.5'); print('diag note hi')"
)


def conv_graph():
    return parse_steps(CONV_STEPS, small_conv_spec())


def test_external_reward_parses_the_protocol():
    report = external_reward(conv_graph(), [sys.executable, "-c", STUB_OK])
    assert report.reward == 0.5
    assert report.diag("note") == "hi"


def test_external_reward_rejects_garbage_output():
    cmd = [sys.executable, "-c", "import sys; sys.stdin.read(); print('mumble')"]
    with pytest.raises(RewardFailure, match="no usable reward"):
        external_reward(conv_graph(), cmd)


def test_external_reward_rejects_nonzero_exit():
    cmd = [sys.executable, "-c", "import sys; sys.stdin.read(); sys.exit(3)"]
    with pytest.raises(RewardFailure, match="exited 3"):
        external_reward(conv_graph(), cmd)


def test_external_reward_enforces_the_timeout():
    cmd = [sys.executable, "-c", "import time; time.sleep(30)"]
    with pytest.raises(RewardFailure, match="timed out"):
        external_reward(conv_graph(), cmd, timeout=1.0)


def test_external_reward_clips_out_of_range_values():
    cmd = [sys.executable, "-c", "import sys; sys.stdin.read(); print('reward 7.0')"]
    assert external_reward(conv_graph(), cmd).reward == 1.0
    cmd = [sys.executable, "-c", "import sys; sys.stdin.read(); print('reward nan')"]
    with pytest.raises(RewardFailure):
        external_reward(conv_graph(), cmd)


def test_make_reward_fn_memoizes_by_operator_text(conv_target):
    calls = []

    def backend(graph):
        calls.append(graph)
        return RewardReport(reward=0.25, diagnostics=())

    fn = make_reward_fn(backend)
    g = conv_graph()
    assert fn(g) == 0.25
    assert fn(conv_graph()) == 0.25
    assert len(calls) == 1
