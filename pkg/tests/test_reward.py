import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zoomrl.geom import Box, GeometryError
from zoomrl.reward import (
    ConfigError,
    FidelityParams,
    RedundancyParams,
    RewardMode,
    ThresholdSchedule,
    answer_reward,
    redundancy_penalty,
    schedule_h0,
    step_fidelity,
    total_reward,
    trajectory_fidelity,
)
from zoomrl.task import Task
from zoomrl.trace import Trace, TraceConfig, TraceStep, ZoomAction, parse_trace
from oracles import step_fidelity_oracle, trajectory_oracle

FP, RP = FidelityParams(), RedundancyParams()
GT = Box(0, 0, 10, 10)


def zoom(*coords):
    return ZoomAction("image_zoom_in", Box(*coords))


def task(**kw):
    base = dict(task_id="t", question="q", answer="A", choices=("red", "blue"), rationale=GT)
    return Task(**{**base, **kw})


@pytest.mark.parametrize("u,expected", [(0.0, -1.0), (0.3, 0.0), (0.55, 1.4), (1.0, 2.4)])
def test_step_fidelity_examples(u, expected):
    assert step_fidelity(u, FP) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=300, deadline=None)
@given(
    st.floats(0, 1),
    st.floats(0.1, 3),
    st.floats(0, 1),
    st.floats(0.05, 0.95),
    st.floats(0.01, 0.5),
)
def test_step_fidelity_matches_decimal_oracle(u, r_base, eta, h0, dh):
    p = FidelityParams(r_base=r_base, eta=eta, h0=h0, dh=dh)
    assert step_fidelity(u, p) == pytest.approx(step_fidelity_oracle(u, r_base, eta, h0, dh), abs=1e-9)


def test_redundancy_examples():
    one = [zoom(0, 0, 1, 1)]
    assert redundancy_penalty(1, one, RP) == 0.0
    three = [zoom(0, 0, 1, 1), zoom(2, 2, 3, 3), zoom(4, 4, 5, 5)]
    assert redundancy_penalty(3, three, RP) == pytest.approx(0.1)
    dup = [zoom(0, 0, 1, 1), zoom(0, 0, 1, 1)]
    assert redundancy_penalty(2, dup, RP) == pytest.approx(0.1)
    with pytest.raises(IndexError):
        redundancy_penalty(0, one, RP)


def test_trajectory_examples():
    assert trajectory_fidelity([], GT, FP, RP).r_fid_bar == 0.0
    half = zoom(0, 0, 10, 5.5)  # IoU 0.55 with GT
    assert trajectory_fidelity([half], GT, FP, RP).r_fid_bar == pytest.approx(1.4)
    miss = zoom(20, 20, 30, 30)
    res = trajectory_fidelity([half, miss], GT, FP, RP)
    assert res.r_fid_bar == pytest.approx(0.2)
    assert res.per_step_penalty == (0.0, 0.0)
    with pytest.raises(GeometryError):
        trajectory_fidelity([half], Box(0, 0, 0, 5), FP, RP)


def test_trajectory_matches_oracle_sample():
    rng = random.Random(3)
    for _ in range(300):
        boxes = []
        for _ in range(rng.randint(0, 6)):
            x, y = rng.randint(0, 15), rng.randint(0, 15)
            boxes.append((x, y, x + rng.randint(1, 8), y + rng.randint(1, 8)))
        got = trajectory_fidelity([zoom(*b) for b in boxes], GT, FP, RP).r_fid_bar
        want = trajectory_oracle(boxes, GT.to_list(), (1.0, 0.2, 0.3, 0.1), (2, 0.1, 0.8))
        assert got == pytest.approx(want, abs=1e-9)


def test_answer_reward():
    choices = ("red", "blue")
    assert answer_reward("B", "B", choices) == 1.0
    assert answer_reward(None, "B", choices) == 0.0
    assert answer_reward(" b ", "B", choices) == 1.0
    assert answer_reward("Blue", "B", choices) == 1.0
    assert answer_reward("A", "B", choices) == 0.0
    with pytest.raises(ConfigError):
        answer_reward("A", "Z", choices)


def test_total_reward_compositions():
    cfg = TraceConfig()
    plain = Trace((TraceStep("x", answer="A"),))
    _, ok = parse_trace("<think>x</think> <answer>A</answer>", cfg)
    assert total_reward(plain, ok, task()).r_total == pytest.approx(1.5)

    perfect = Trace((TraceStep("x", zoom=zoom(0, 0, 10, 10)), TraceStep("y", answer="A")))
    assert total_reward(perfect, ok, task()).r_total == pytest.approx(3.9)

    broken, bad = parse_trace("<think>x</think> <answer>A", cfg)
    bd = total_reward(broken, bad, task())
    assert bd.r_fmt == -0.5 and bd.r_acc == 0.0


def test_total_reward_modes():
    _, ok = parse_trace("<think>x</think> <answer>A</answer>", TraceConfig())
    t = Trace((TraceStep("a", zoom=zoom(50, 50, 60, 60)), TraceStep("b", zoom=zoom(70, 70, 80, 80)),
               TraceStep("c", answer="A")))
    assert total_reward(t, ok, task(), mode=RewardMode.OUTCOME_ONLY).r_fid_bar == 0.0
    naive = total_reward(t, ok, task(), mode="naive_stepwise")
    assert naive.r_fid_bar == pytest.approx(1.0) and naive.per_step_penalty == (0.0, 0.0)
    assert total_reward(t, ok, task()).r_fid_bar == pytest.approx(-1.0)


def test_schedule_linear():
    s = ThresholdSchedule()
    assert schedule_h0(s, 0) == pytest.approx(0.2)
    assert schedule_h0(s, 50) == pytest.approx(0.35)
    assert schedule_h0(s, 100) == pytest.approx(0.5)
    assert schedule_h0(s, 10_000) == pytest.approx(0.5)


def test_schedule_competence():
    s = ThresholdSchedule(mode="competence")
    h = schedule_h0(s, 0, recent_hit_rate=0.0)
    assert h == pytest.approx(0.2)
    for _ in range(20):
        h = schedule_h0(s, 0, recent_hit_rate=0.9, current=h)
        assert 0.2 <= h <= 0.5
    assert h == pytest.approx(0.5)
    assert schedule_h0(s, 0, recent_hit_rate=0.1, current=0.3) == pytest.approx(0.3)


def test_params_validated():
    with pytest.raises(ValueError):
        ThresholdSchedule(h0_start=0.6, h0_end=0.5)
    with pytest.raises(ValueError):
        FidelityParams(h0=1.0)
    with pytest.raises(ValueError):
        RedundancyParams(unknown=1)
