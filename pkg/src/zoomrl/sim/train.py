"""Grouped rollouts, token-level policy updates and the seeded training driver."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import random
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from ..config import RunConfig
from ..credit import (
    AdvantageProfile,
    GroupRollout,
    broadcast_to_tokens,
    clipped_surrogate_grad,
    dynamic_sample_filter,
    group_profiles,
)
from ..geom import Box, coverage, iou
from ..metrics import TraceScore, aggregate, score_trace
from ..reward import FidelityParams, RewardBreakdown, RewardMode, schedule_h0, total_reward
from ..seeding import derive_seed, py_rng
from ..task import Task
from ..trace import (
    FormatVerdict,
    Trace,
    TraceConfig,
    TraceStep,
    ZoomAction,
    extract_actions,
    parse_trace,
    render_trace,
    trace_record,
)
from .env import EnvConfig, NeedleEnv, NeedleTask, Outcome, generate_task
from .policy import (
    ANCHOR,
    ANSWER,
    CONTINUE,
    STOP,
    Decision,
    PolicyParams,
    Sampler,
    answer_features,
    PolicyTables,
    make_anchors,
)


class PolicyUpdateError(FloatingPointError):
    def __init__(self, message: str, dump: dict[str, Any]):
        super().__init__(message)
        self.dump = dump


@dataclass
class Episode:
    task_id: str
    raw: str
    trace: Trace
    verdict: FormatVerdict
    breakdown: RewardBreakdown
    step_decisions: list[list[Decision]]

    def token_segmentation(self) -> list[tuple[int, int]]:
        return [(k, len(ds)) for k, ds in enumerate(self.step_decisions)]


@dataclass
class GroupResult:
    task: NeedleTask
    episodes: list[Episode]

    def as_rollout(self) -> GroupRollout:
        return GroupRollout(self.task.task_id, tuple((e.trace, e.breakdown) for e in self.episodes))


ZOOM_THINK = "Zooming in to inspect this region."
ANSWER_THINK = "Answering from the gathered evidence."


class StepBank:
    """Interned trace steps and decision tokens.

    Each distinct trace is rendered to text and parsed back once per run, so the
    grammar and format check run on every trace the policy produces.
    """

    def __init__(self, anchors: Sequence[Box], n_choices: int, n_cues: int, tcfg: TraceConfig):
        self.tcfg = tcfg
        self.zoom_steps = [TraceStep(ZOOM_THINK, zoom=ZoomAction(tcfg.tool_name, a)) for a in anchors]
        self.answer_steps = [TraceStep(ANSWER_THINK, answer=chr(ord("A") + i)) for i in range(n_choices)]
        self.stop = [Decision(STOP, turn=t) for t in range(tcfg.max_rounds)]
        self.anchor_tokens = [[Decision(ANCHOR, cue=c, choice=a) for a in range(len(anchors))] for c in range(n_cues)]
        self.continue_tokens = [Decision(CONTINUE, turn=t) for t in range(tcfg.max_rounds)]
        self.traces: dict[tuple, tuple[str, Trace, FormatVerdict]] = {}

    def trace(self, picked: tuple[int, ...], choice: int) -> tuple[str, Trace, FormatVerdict]:
        key = (picked, choice)
        hit = self.traces.get(key)
        if hit is None:
            built = Trace(tuple(self.zoom_steps[a] for a in picked) + (self.answer_steps[choice],))
            raw = render_trace(built, self.tcfg)
            parsed, verdict = parse_trace(raw, self.tcfg)
            hit = self.traces[key] = (raw, parsed, verdict)
        return hit


@dataclass
class RewardContext:
    """Scores episodes at one training step; rewards are pure, so they are memoized."""

    mode: RewardMode
    fidelity: FidelityParams
    cfg: RunConfig
    cache: dict = field(default_factory=dict)

    def score(
        self, picked: tuple[int, ...], choice: int, trace: Trace, verdict: FormatVerdict, task: NeedleTask
    ) -> RewardBreakdown:
        t = task.as_task()
        key = (picked, choice, t.answer, t.rationale, self.fidelity.h0)
        out = self.cache.get(key)
        if out is None:
            r = self.cfg.reward
            out = self.cache[key] = total_reward(
                trace, verdict, t, self.fidelity, r.redundancy, r.format, mode=self.mode, naive_bonus=r.naive_bonus
            )
        return out


def run_episode(
    sampler: Sampler,
    task: NeedleTask,
    bank: StepBank,
    rng: random.Random,
    ctx: RewardContext,
    max_rounds: int,
) -> Episode:
    env = NeedleEnv(task, max_rounds=max_rounds)
    env.reset()
    step_decisions: list[list[Decision]] = []
    seen: dict = {}
    picked: list[int] = []
    anchor_tokens = bank.anchor_tokens[task.cue]
    turn = 0
    while not sampler.stop(rng, turn):
        a = sampler.anchor(rng, task.cue)
        picked.append(a)
        obs = env.step(bank.zoom_steps[a].zoom)
        seen.update(obs.glyphs)
        step_decisions.append([bank.continue_tokens[turn], anchor_tokens[a]])
        turn += 1
    decisions = [bank.stop[turn]] if turn < max_rounds else []
    key = tuple(picked)
    feats = task.memo(("features", key), lambda: answer_features(task.choices, task.hint, seen))
    choice = sampler.answer(rng, feats)
    decisions.append(Decision(ANSWER, choice=choice, features=feats))
    step_decisions.append(decisions)
    out = env.step(bank.answer_steps[choice].answer)
    assert isinstance(out, Outcome)

    raw, trace, verdict = bank.trace(key, choice)
    breakdown = ctx.score(key, choice, trace, verdict, task)
    return Episode(task.task_id, raw, trace, verdict, breakdown, step_decisions)


def rollout_group(
    sampler: Sampler,
    task: NeedleTask,
    group_size: int,
    seed: int,
    bank: StepBank,
    ctx: RewardContext,
    max_rounds: int,
) -> GroupResult:
    """``group_size`` independent episodes. Rollout ``i`` draws from its own RNG stream
    derived from (seed, task id, i), so results do not depend on execution order."""
    base = derive_seed(seed, "rollout", task.task_id)
    episodes = [
        run_episode(sampler, task, bank, random.Random(base + i), ctx, max_rounds) for i in range(group_size)
    ]
    return GroupResult(task, episodes)


def policy_update(
    params: PolicyParams,
    groups: Sequence[GroupResult],
    profiles: Sequence[Sequence[AdvantageProfile]],
    lr: float,
    *,
    epochs: int = 1,
    eps_low: float = 0.2,
    eps_high: float = 0.28,
) -> PolicyParams:
    """Gradient ascent on the token-mean clipped surrogate.

    The first epoch is on-policy (ratio 1), where the surrogate gradient reduces to
    ``A_hat * grad log p``. Later epochs replay the same tokens with ratios against
    the behaviour policy.
    """
    tokens: list[tuple[Decision, float]] = []
    for group, group_prof in zip(groups, profiles):
        for ep, prof in zip(group.episodes, group_prof):
            adv = broadcast_to_tokens(prof, ep.token_segmentation())
            flat = [d for ds in ep.step_decisions for d in ds]
            tokens.extend(zip(flat, adv))
    new = params.copy()
    if not tokens or lr == 0:
        return new
    n = len(tokens)
    old = PolicyTables(params)
    old_lp = [old.log_prob(d) for d, _ in tokens] if epochs > 1 else None
    for epoch in range(epochs):
        tables = old if epoch == 0 else PolicyTables(new)
        weighted = []
        on_policy: dict[float, float] = {}
        for i, (d, a_hat) in enumerate(tokens):
            if a_hat == 0:
                continue
            if epoch == 0:
                coef = on_policy.get(a_hat)
                if coef is None:
                    coef = on_policy[a_hat] = clipped_surrogate_grad(1.0, a_hat, eps_low, eps_high)
            else:
                ratio = math.exp(tables.log_prob(d) - old_lp[i])
                coef = clipped_surrogate_grad(ratio, a_hat, eps_low, eps_high) * ratio
            if coef != 0:
                weighted.append((d, coef / n))
        grad = new.zeros_like()
        tables.accumulate_grad(weighted, grad)
        for g in grad.arrays():
            if not np.isfinite(g).all():
                raise PolicyUpdateError(
                    "non-finite policy gradient",
                    {
                        "tokens": n,
                        "grad": grad.to_json(),
                        "params": new.to_json(),
                        "advantages": [a for _, a in tokens],
                    },
                )
        for p, g in zip(new.arrays(), grad.arrays()):
            p += lr * g
    if not new.is_finite():
        raise PolicyUpdateError("policy parameters became non-finite", {"params": new.to_json()})
    return new


SERIES = (
    "answer_acc",
    "rationale_count",
    "rationale_acc",
    "trace_rationale_acc",
    "wrong_with_rationale",
    "mean_reward",
    "mean_fid",
    "h0",
    "kept_groups",
    "max_abs_adv_sum",
)


@dataclass
class TrainingLog:
    reward_mode: str
    seed: int
    series: dict[str, list[float]] = field(default_factory=lambda: {k: [] for k in SERIES})

    @property
    def iterations(self) -> int:
        return len(self.series["answer_acc"])

    def append(self, row: dict[str, float]) -> None:
        for k in SERIES:
            self.series[k].append(float(row[k]))

    def final(self, name: str, window: int = 10) -> float:
        """Mean of the last ``window`` iterations of a series."""
        values = self.series[name][-window:]
        return sum(values) / len(values) if values else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iteration",) + SERIES)
        for i in range(self.iterations):
            w.writerow([i] + [repr(self.series[k][i]) for k in SERIES])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, reward_mode: str = "", seed: int = 0) -> "TrainingLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        log = cls(reward_mode, seed)
        for row in rows:
            log.append({k: float(row[k]) for k in SERIES})
        return log


@dataclass
class ExperimentResult:
    log: TrainingLog
    params: PolicyParams
    traces: list[dict[str, Any]]

    def manifest(self, cfg: RunConfig) -> dict[str, Any]:
        digest = hashlib.sha256(json.dumps(self.params.to_json()).encode()).hexdigest()
        w = cfg.sim.final_window
        return {
            "seed": cfg.seed,
            "reward_mode": self.log.reward_mode,
            "iterations": self.log.iterations,
            "final": {k: self.log.final(k, w) for k in SERIES},
            "final_window": w,
            "params_sha256": digest,
            "config": cfg.dump(),
        }


def grounding_prior(env: EnvConfig, anchors: Sequence[Box]) -> np.ndarray:
    """IoU of every anchor with each cue's target block: the starting policy's partial
    grounding ability, standing in for a pretrained model's localization skill."""
    s = env.gt_max_cells
    rows = []
    for x, y in env.gt_positions():
        block = Box(float(x), float(y), float(x + s), float(y + s))
        rows.append([iou(a, block) for a in anchors])
    return np.array(rows)


def _episode_metrics(cache: dict, e: Episode, task: Task) -> tuple[TraceScore, list[float]]:
    """Trace score plus per-zoom coverage; traces are interned per run, so key on identity."""
    key = (id(e.trace), task.answer, task.choices, task.rationale)
    hit = cache.get(key)
    if hit is None:
        hit = cache[key] = (
            score_trace(e.trace, task),
            [coverage(a.box, task.rationale) for a in extract_actions(e.trace)],
        )
    s, covs = hit
    return replace(s, task_id=task.task_id), covs


def _sample_tasks(cfg: RunConfig, iteration: int, tag: str, count: int) -> list[NeedleTask]:
    return [
        generate_task(py_rng(cfg.seed, "task", iteration, tag, j), cfg.sim.env, f"it{iteration}-{tag}{j}")
        for j in range(count)
    ]


def run_experiment(cfg: RunConfig, *, keep_traces: bool = False) -> ExperimentResult:
    """Seeded training run; identical config gives an identical log and parameters."""
    sim = cfg.sim
    env = sim.env
    mode = RewardMode(sim.reward_mode)
    anchors = make_anchors(env.grid_w, env.grid_h, sim.anchor_sizes, sim.anchor_stride)
    params = PolicyParams.init(
        len(env.gt_positions()),
        len(anchors),
        env.max_rounds,
        sim.init_stop_logit,
        sim.init_w_hint,
        sim.init_w_obs,
    )
    params.anchor_logits += sim.init_grounding * grounding_prior(env, anchors)
    bank = StepBank(anchors, env.n_choices, len(env.gt_positions()), TraceConfig(max_rounds=env.max_rounds, bounds=env.bounds))
    log = TrainingLog(mode.value, cfg.seed)
    traces: list[dict[str, Any]] = []
    schedule = cfg.reward.schedule
    h0 = cfg.reward.fidelity.h0 if schedule is None else schedule.h0_start
    hit_rate = 0.0
    cache: dict = {}
    metric_cache: dict = {}

    for it in range(sim.iterations):
        if schedule is not None:
            h0 = schedule_h0(schedule, it, hit_rate, current=h0 if it else None)
        ctx = RewardContext(mode, cfg.reward.fidelity.model_copy(update={"h0": h0}), cfg, cache)
        sampler = Sampler(params, sim.temperature)

        def run_groups(tasks: list[NeedleTask]) -> list[GroupResult]:
            return [rollout_group(sampler, t, sim.group_size, cfg.seed, bank, ctx, env.max_rounds) for t in tasks]

        primary = run_groups(_sample_tasks(cfg, it, "t", sim.batch_size))
        kept = [g for g in primary if dynamic_sample_filter(g.as_rollout())]
        for r in range(1, sim.max_resample_rounds + 1):
            if len(kept) >= sim.batch_size:
                break
            extra = run_groups(_sample_tasks(cfg, it, f"r{r}-", sim.batch_size - len(kept)))
            kept.extend(g for g in extra if dynamic_sample_filter(g.as_rollout()))
        kept = kept[: sim.batch_size]

        modulated = mode is RewardMode.VIRL
        profiles = [
            group_profiles(g.as_rollout(), cfg.credit.modulator, modulated=modulated, std_normalize=cfg.credit.std_normalize)
            for g in kept
        ]
        adv_sums = [abs(math.fsum(p.a_traj for p in prof)) for prof in profiles]

        episodes = [e for g in primary for e in g.episodes]
        scores, zoom_cov = [], []
        for g in primary:
            task = g.task.as_task()
            for e in g.episodes:
                s, covs = _episode_metrics(metric_cache, e, task)
                scores.append(s)
                zoom_cov.extend(covs)
        report = aggregate(scores)
        fids = [f for e in episodes for f in e.breakdown.per_step_fid]
        hit_rate = sum(f > 0 for f in fids) / len(fids) if fids else 0.0
        log.append(
            {
                "answer_acc": report.acc_ans,
                "rationale_count": report.c_rat,
                "rationale_acc": sum(zoom_cov) / len(zoom_cov) if zoom_cov else 0.0,
                "trace_rationale_acc": report.acc_rat,
                "wrong_with_rationale": report.wrong_with / max(1, report.with_rationale),
                "mean_reward": sum(e.breakdown.r_total for e in episodes) / len(episodes),
                "mean_fid": sum(e.breakdown.r_fid_bar for e in episodes) / len(episodes),
                "h0": h0,
                "kept_groups": len(kept),
                "max_abs_adv_sum": max(adv_sums, default=0.0),
            }
        )
        if keep_traces:
            for g in primary:
                for e in g.episodes:
                    rec = trace_record(e.task_id, e.raw, e.trace, e.verdict)
                    rec["iteration"] = it
                    rec["task"] = g.task.as_task().to_json()
                    rec["breakdown"] = e.breakdown.to_json()
                    traces.append(rec)

        params = policy_update(
            params, kept, profiles, sim.lr, epochs=sim.epochs, eps_low=cfg.credit.eps_low, eps_high=cfg.credit.eps_high
        )
    return ExperimentResult(log, params, traces)
