"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import math
import random
import string
import time

import pytest

from zoomrl.config import RunConfig
from zoomrl.credit import (
    ModulatorParams,
    StepClass,
    classify_steps,
    clipped_surrogate,
    clipped_surrogate_grad,
    group_advantages,
    modulate,
)
from zoomrl.datapipe import curate, dumps_jsonl, synthetic_records
from zoomrl.geom import Box, ScoredBox, coverage, iou, nms
from zoomrl.metrics import f1
from zoomrl.reward import (
    FidelityParams,
    RedundancyParams,
    RewardBreakdown,
    step_fidelity,
    trajectory_fidelity,
)
from zoomrl.sim.train import run_experiment
from zoomrl.trace import Trace, TraceConfig, TraceStep, Violation, ZoomAction, parse_trace, render_trace
from oracles import coverage_oracle, iou_oracle, nms_oracle, trajectory_oracle


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion to the terminal, bypassing capture."""

    def emit(n, ok, detail, elapsed):
        with capsys.disabled():
            print(f"\n[criterion {n:2d}] {'PASS' if ok else 'FAIL'} ({elapsed:.2f}s) {detail}")

    return emit


def rand_box(rng, hi=20.0, integer=False):
    if integer:
        x1, x2 = sorted((rng.randint(0, int(hi)), rng.randint(0, int(hi))))
        y1, y2 = sorted((rng.randint(0, int(hi)), rng.randint(0, int(hi))))
        return Box(float(x1), float(y1), float(x2), float(y2))
    x1, x2 = sorted((rng.uniform(0, hi), rng.uniform(0, hi)))
    y1, y2 = sorted((rng.uniform(0, hi), rng.uniform(0, hi)))
    return Box(x1, y1, x2, y2)


def test_c01_f1_reconstruction(verdict):
    rows = [((0.904, 0.873), 0.88), ((0.714, 0.282), 0.40), ((0.889, 0.782), 0.83), ((0.799, 0.473), 0.59)]
    t0 = time.perf_counter()
    devs = [abs(f1(a, r) - printed) for (a, r), printed in rows]
    elapsed = time.perf_counter() - t0
    ok = max(devs) <= 0.01 and elapsed < 1.0
    verdict(1, ok, f"4 rows within 0.01 of the printed F1 (max deviation {max(devs):.4f})", elapsed)
    assert ok


def test_c02_staircase(verdict):
    rng = random.Random(2)
    bd_trace = Trace((TraceStep("z", zoom=ZoomAction("image_zoom_in", Box(0, 0, 1, 1))), TraceStep("a", answer="A")))
    violations = []
    t0 = time.perf_counter()
    for case in range(1000):
        p = FidelityParams(
            r_base=rng.uniform(0.1, 3), eta=rng.uniform(0, 1), h0=rng.uniform(0.05, 0.95), dh=rng.uniform(0.01, 0.5)
        )
        u1, u2 = sorted((rng.random(), rng.random()))
        f_lo, f_hi = step_fidelity(u1, p), step_fidelity(u2, p)
        if f_lo > f_hi:
            violations.append((case, "monotone"))
        for u in (u1, u2, p.h0):
            f = step_fidelity(u, p)
            bd = RewardBreakdown(0.0, 0.0, (f,), (0.0,), 0.0, 0.0)
            good = classify_steps(bd_trace, bd)[0] is StepClass.GOOD_VISUAL
            if (f > 0) != (u > p.h0) or good != (f > 0):
                violations.append((case, "sign"))
        # interior of the k-th stair: exactly r_base + k * eta
        k_max = int((1 - p.h0) / p.dh)
        k = rng.randint(0, k_max)
        u = p.h0 + (k + rng.uniform(0.05, 0.95)) * p.dh
        if u <= 1 and not math.isclose(step_fidelity(u, p), p.r_base + k * p.eta, abs_tol=1e-12):
            violations.append((case, "increment"))
    elapsed = time.perf_counter() - t0
    ok = not violations and elapsed < 5.0
    verdict(2, ok, f"1000 random cases, {len(violations)} violations", elapsed)
    assert ok, violations[:5]


def test_c03_trajectory_oracle(verdict):
    rng = random.Random(3)
    worst = 0.0
    t0 = time.perf_counter()
    for _ in range(10_000):
        fp = FidelityParams(
            r_base=rng.uniform(0.1, 2), eta=rng.uniform(0, 0.5), h0=rng.uniform(0.1, 0.9), dh=rng.uniform(0.05, 0.3)
        )
        rp = RedundancyParams(budget=rng.randint(0, 4), lam=rng.uniform(0, 0.5), dup_iou=rng.uniform(0.3, 1.0))
        gt = rand_box(rng)
        while gt.area == 0:
            gt = rand_box(rng)
        boxes = []
        for _ in range(rng.randint(0, 6)):
            boxes.append(boxes[-1] if boxes and rng.random() < 0.2 else rand_box(rng))
        got = trajectory_fidelity([ZoomAction("image_zoom_in", b) for b in boxes], gt, fp, rp).r_fid_bar
        want = trajectory_oracle(
            [b.to_list() for b in boxes], gt.to_list(), (fp.r_base, fp.eta, fp.h0, fp.dh), (rp.budget, rp.lam, rp.dup_iou)
        )
        worst = max(worst, abs(got - want))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10.0
    verdict(3, ok, f"10000 traces vs re-summation oracle, max |diff| {worst:.2e}", elapsed)
    assert ok


def test_c04_advantages_sum_to_zero(verdict):
    rng = random.Random(4)
    bad = 0
    t0 = time.perf_counter()
    for _ in range(10_000):
        g = rng.randint(1, 16)
        rewards = [rng.uniform(-5, 5) for _ in range(g)]
        if abs(sum(group_advantages(rewards))) > 1e-12 * g:
            bad += 1
    elapsed = time.perf_counter() - t0
    ok = bad == 0 and elapsed < 5.0
    verdict(4, ok, f"10000 groups, {bad} with |sum| > 1e-12*G", elapsed)
    assert ok


def test_c05_modulator_ordering(verdict):
    rng = random.Random(5)
    bad = 0
    t0 = time.perf_counter()
    classes = [StepClass.GOOD_VISUAL, StepClass.TEXTUAL, StepClass.BAD_VISUAL]
    for _ in range(10_000):
        p = ModulatorParams(
            h_good_pos=rng.uniform(1.001, 3),
            h_bad_pos=rng.uniform(0.001, 0.999),
            h_good_neg=rng.uniform(0.001, 0.999),
            h_bad_neg=rng.uniform(1.001, 3),
        )
        a = rng.uniform(0.01, 5) * rng.choice((1, -1))
        good, text, bad_ = (s.a_hat for s in modulate(a, classes, p).per_step)
        if a > 0:
            ordered = good > text > bad_
        else:
            ordered = abs(bad_) > abs(text) > abs(good)
        signs = all(math.copysign(1, x) == math.copysign(1, a) for x in (good, text, bad_))
        bad += not (ordered and signs)
    elapsed = time.perf_counter() - t0
    ok = bad == 0
    verdict(5, ok, f"10000 cases, {bad} ordering or sign violations", elapsed)
    assert ok


def test_c06_geometry_oracles(verdict):
    rng = random.Random(6)
    worst, nms_mismatch = 0.0, 0
    t0 = time.perf_counter()
    for _ in range(10_000):
        a, b = rand_box(rng), rand_box(rng)
        worst = max(worst, abs(iou(a, b) - iou_oracle(a.to_list(), b.to_list())))
        if b.area > 0:
            worst = max(worst, abs(coverage(a, b) - coverage_oracle(a.to_list(), b.to_list())))
    for _ in range(10_000):
        n = rng.randint(0, 8)
        cands = [ScoredBox(rand_box(rng, 12, integer=True), float(rng.randint(0, 3))) for _ in range(n)]
        thresh = rng.choice((0.0, 0.3, 0.5, 0.7, 1.0))
        kept = [id(c) for c in nms(cands, thresh)]
        expected = nms_oracle([c.box.to_list() for c in cands], [c.score for c in cands], thresh)
        nms_mismatch += kept != [id(cands[i]) for i in expected]
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and nms_mismatch == 0
    verdict(6, ok, f"IoU/coverage max |diff| {worst:.2e}; NMS mismatches {nms_mismatch}/10000", elapsed)
    assert ok


TOOL = '{"name": "image_zoom_in", "arguments": {"box": [1, 2, 3, 4]}}'
MALFORMED = [
    ("<think>x</think> <answer>A", Violation.UNCLOSED_TAG),
    (f"<think>x</think> <tool_call>{TOOL}</tool_call> <answer>A</answer>", Violation.ANSWER_WITH_TOOL),
    ("<answer>A</answer>", Violation.MISSING_THINK),
    (f"<think>x</think> <tool_call>{TOOL}</tool_call>", Violation.MISSING_ANSWER),
    ("<think>x</think> <think>y</think> <answer>A</answer>", Violation.MISSING_ACTION),
    ('<think>x</think> <tool_call>{"name": "crop", "arguments": {"box": [1,2,3,4]}}</tool_call>', Violation.BAD_TOOL_PAYLOAD),
    ("<think>x</think> <tool_call>{not json}</tool_call>", Violation.BAD_TOOL_PAYLOAD),
    ("<think>x</think> <answer>A</answer> trailing", Violation.TRAILING_GARBAGE),
    ("hello <think>x</think> <answer>A</answer>", Violation.TRAILING_GARBAGE),
    (f"<think>x</think> <tool_call>{TOOL}</tool_call>" * 7 + "<think>y</think> <answer>A</answer>", Violation.OVER_ROUND_LIMIT),
]


def random_trace(rng):
    alphabet = string.ascii_letters + string.digits + " .,;:!?'\"{}[]()/&\n\t"

    def text():
        s = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, 30))).strip()
        return s or "t"

    steps = [TraceStep(text(), zoom=ZoomAction("image_zoom_in", rand_box(rng, 1000))) for _ in range(rng.randint(0, 6))]
    steps.append(TraceStep(text(), answer=text()))
    return Trace(tuple(steps))


def test_c07_parser_round_trip(verdict):
    rng = random.Random(7)
    cfg = TraceConfig()
    failures = 0
    t0 = time.perf_counter()
    for _ in range(1000):
        t = random_trace(rng)
        raw = render_trace(t, cfg)
        back, v = parse_trace(raw, cfg)
        again, v2 = parse_trace(render_trace(back, cfg), cfg)
        failures += not (v.well_formed and v2.well_formed and back == t and again == t)
    wrong_codes = [raw for raw, code in MALFORMED if parse_trace(raw, cfg)[1].violations != (code,)]
    elapsed = time.perf_counter() - t0
    ok = failures == 0 and not wrong_codes
    verdict(7, ok, f"round-trip failures {failures}/1000; fixtures with wrong code {len(wrong_codes)}/10", elapsed)
    assert ok


def test_c08_surrogate_gradient(verdict):
    rng = random.Random(8)
    h, worst, points = 1e-6, 0.0, 0
    t0 = time.perf_counter()
    while points < 100:
        ratio = rng.uniform(0.05, 2.5)
        a_hat = rng.uniform(-3, 3)
        if min(abs(ratio - 0.8), abs(ratio - 1.28)) < 1e-4:
            continue  # kinks have no derivative
        fd = (clipped_surrogate(ratio + h, a_hat) - clipped_surrogate(ratio - h, a_hat)) / (2 * h)
        worst = max(worst, abs(fd - clipped_surrogate_grad(ratio, a_hat)))
        points += 1
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4
    verdict(8, ok, f"100 points, max |analytic - finite diff| {worst:.2e}", elapsed)
    assert ok


@pytest.mark.slow
def test_c09_dynamics(verdict):
    t0 = time.perf_counter()
    finals = {}
    for seed in range(5):
        for mode in ("outcome_only", "naive_stepwise", "virl"):
            cfg = RunConfig(seed=seed).with_overrides(**{"sim.reward_mode": mode})
            log = run_experiment(cfg).log
            w = cfg.sim.final_window
            finals[seed, mode] = {k: log.final(k, w) for k in ("rationale_count", "rationale_acc", "answer_acc")}
    elapsed = time.perf_counter() - t0
    rows = []
    checks = {"a": True, "b": True, "c": True}
    for seed in range(5):
        o, n, v = (finals[seed, m] for m in ("outcome_only", "naive_stepwise", "virl"))
        a = o["rationale_count"] < 0.2
        b = n["rationale_count"] > v["rationale_count"] and n["rationale_acc"] < v["rationale_acc"]
        c = v["answer_acc"] > o["answer_acc"] and v["rationale_acc"] > o["rationale_acc"]
        checks["a"] &= a
        checks["b"] &= b
        checks["c"] &= c
        rows.append(
            f"seed {seed}: outcome count {o['rationale_count']:.3f}; naive count/acc "
            f"{n['rationale_count']:.2f}/{n['rationale_acc']:.3f} vs virl {v['rationale_count']:.2f}/"
            f"{v['rationale_acc']:.3f}; answer acc virl {v['answer_acc']:.3f} vs outcome {o['answer_acc']:.3f}"
        )
    ok = all(checks.values()) and elapsed < 120.0
    detail = f"(a) {checks['a']} (b) {checks['b']} (c) {checks['c']}, 5 seeds x 3 modes\n  " + "\n  ".join(rows)
    verdict(9, ok, detail, elapsed)
    assert all(checks.values()), detail
    assert elapsed < 120.0, f"took {elapsed:.1f}s"


def test_c10_pipeline(verdict):
    records = synthetic_records(500)
    t0 = time.perf_counter()
    first = curate(records, seed=0)
    second = curate(records, seed=0)
    elapsed = time.perf_counter() - t0
    counts = first.manifest["counts"]
    seq = [counts[k] for k in ("records", "generated", "verified", "filtered", "tasks")]
    monotone = all(x >= y for x, y in zip(seq, seq[1:]))
    choices_ok = all(
        4 <= len(t.choices) <= 8 and 0 <= ord(t.answer) - ord("A") < len(t.choices) for t in first.tasks
    )
    same = dumps_jsonl(t.to_json() for t in first.tasks) == dumps_jsonl(t.to_json() for t in second.tasks)
    ok = monotone and choices_ok and same and elapsed < 10.0 and seq[-1] > 0
    verdict(10, ok, f"stage counts {seq}, choices ok {choices_ok}, byte-identical rerun {same}", elapsed)
    assert ok
