"""Scalar rewards: step fidelity, redundancy penalty, trajectory fidelity, answer and
total reward, and the fidelity-threshold schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Any, Literal, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .geom import Box, GeometryError, iou
from .task import Task, choice_label
from .trace import FormatVerdict, Trace, ZoomAction, extract_actions, format_reward


class RewardMode(str, Enum):
    OUTCOME_ONLY = "outcome_only"
    NAIVE_STEPWISE = "naive_stepwise"
    VIRL = "virl"


class _Params(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class FidelityParams(_Params):
    r_base: float = Field(1.0, gt=0, allow_inf_nan=False)
    eta: float = Field(0.2, ge=0, allow_inf_nan=False)
    h0: float = Field(0.3, gt=0, lt=1)
    dh: float = Field(0.1, gt=0, allow_inf_nan=False)


class RedundancyParams(_Params):
    budget: int = Field(2, ge=0)
    lam: float = Field(0.1, ge=0, allow_inf_nan=False)
    dup_iou: float = Field(0.8, ge=0, le=1)


class FormatParams(_Params):
    ok: float = Field(0.5, allow_inf_nan=False)
    bad: float = Field(-0.5, allow_inf_nan=False)


class ThresholdSchedule(_Params):
    h0_start: float = Field(0.2, gt=0, lt=1)
    h0_end: float = Field(0.5, gt=0, lt=1)
    warmup_steps: int = Field(100, ge=0)
    mode: Literal["linear", "competence"] = "linear"
    # competence-gated mode only
    increment: float = Field(0.05, gt=0, allow_inf_nan=False)
    promotion_bar: float = Field(0.6, ge=0, le=1)

    @model_validator(mode="after")
    def _ordered(self) -> "ThresholdSchedule":
        if self.h0_start > self.h0_end:
            raise ValueError(f"h0_start ({self.h0_start}) must be <= h0_end ({self.h0_end})")
        return self


def step_fidelity(u: float, p: FidelityParams) -> float:
    """Signed correctness term plus a staircase refinement bonus above ``h0``.

    ``sign(0) = 0``, so an action exactly at the threshold earns nothing. The bonus
    quotient is rounded to 9 decimals before flooring so that e.g. 0.7/0.1 counts 7.
    """
    d = u - p.h0
    sign = (d > 0) - (d < 0)
    steps = math.floor(round(max(0.0, d) / p.dh, 9))
    return p.r_base * sign + p.eta * steps


def duplicate_count(k: int, actions: Sequence[ZoomAction], dup_iou: float) -> int:
    box = actions[k - 1].box
    return sum(1 for j in range(k - 1) if iou(actions[j].box, box) > dup_iou)


def redundancy_penalty(k: int, actions: Sequence[ZoomAction], p: RedundancyParams) -> float:
    """Penalty for the ``k``-th action (1-based): ``lam * max(0, C_k - budget)**2``.

    ``C_k`` counts actions up to and including ``k`` plus one extra per earlier action
    overlapping action ``k`` beyond ``dup_iou``.
    """
    if not 1 <= k <= len(actions):
        raise IndexError(f"k={k} outside 1..{len(actions)}")
    c_k = k + duplicate_count(k, actions, p.dup_iou)
    excess = max(0, c_k - p.budget)
    return p.lam * excess * excess


@dataclass(frozen=True)
class FidelityResult:
    r_fid_bar: float
    per_step_fid: tuple[float, ...]
    per_step_penalty: tuple[float, ...]


def trajectory_fidelity(
    actions: Sequence[ZoomAction],
    gt: Box,
    fp: FidelityParams,
    rp: RedundancyParams,
) -> FidelityResult:
    """Mean over zoom actions of ``R_fid(a_k) - rho(C_k)``; 0 when there are none."""
    if gt.area <= 0:
        raise GeometryError("ground-truth rationale has zero area")
    if not actions:
        return FidelityResult(0.0, (), ())
    fids = tuple(step_fidelity(iou(a.box, gt), fp) for a in actions)
    pens = tuple(redundancy_penalty(k, actions, rp) for k in range(1, len(actions) + 1))
    total = sum(f - r for f, r in zip(fids, pens))
    return FidelityResult(total / len(actions), fids, pens)


def _normalize(text: str) -> str:
    return " ".join(text.split()).casefold()


def resolve_choice(text: str, choices: Sequence[str]) -> int | None:
    """Index of the choice named by ``text`` (label letter or full text), else None."""
    return _resolve(text, tuple(choices))


@lru_cache(maxsize=8192)
def _resolve(text: str, choices: tuple[str, ...]) -> int | None:
    norm = _normalize(text)
    if not norm:
        return None
    for i in range(len(choices)):
        if norm == choice_label(i).casefold():
            return i
    for i, c in enumerate(choices):
        if norm == _normalize(c):
            return i
    return None


class ConfigError(ValueError):
    pass


def answer_reward(answer: str | None, key: str, choices: Sequence[str]) -> float:
    key_idx = resolve_choice(key, choices)
    if key_idx is None:
        raise ConfigError(f"answer key {key!r} is not among the choices")
    if answer is None:
        return 0.0
    return 1.0 if resolve_choice(answer, choices) == key_idx else 0.0


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: float
    r_fmt: float
    per_step_fid: tuple[float, ...]
    per_step_penalty: tuple[float, ...]
    r_fid_bar: float
    r_total: float

    def to_json(self) -> dict[str, Any]:
        return {
            "r_acc": self.r_acc,
            "r_fmt": self.r_fmt,
            "per_step_fid": list(self.per_step_fid),
            "per_step_penalty": list(self.per_step_penalty),
            "r_fid_bar": self.r_fid_bar,
            "r_total": self.r_total,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "RewardBreakdown":
        return cls(
            r_acc=obj["r_acc"],
            r_fmt=obj["r_fmt"],
            per_step_fid=tuple(obj["per_step_fid"]),
            per_step_penalty=tuple(obj["per_step_penalty"]),
            r_fid_bar=obj["r_fid_bar"],
            r_total=obj["r_total"],
        )


def total_reward(
    trace: Trace,
    verdict: FormatVerdict,
    task: Task,
    fp: FidelityParams | None = None,
    rp: RedundancyParams | None = None,
    fmt: FormatParams | None = None,
    mode: RewardMode = RewardMode.VIRL,
    naive_bonus: float = 0.5,
) -> RewardBreakdown:
    """Answer + format + process-fidelity reward for one trace.

    ``outcome_only`` zeroes the fidelity term; ``naive_stepwise`` pays a flat
    ``naive_bonus`` per zoom, summed, with no redundancy penalty.
    """
    fp = fp or FidelityParams()
    rp = rp or RedundancyParams()
    fmt = fmt or FormatParams()
    r_acc = answer_reward(trace.answer, task.answer, task.choices)
    r_fmt = format_reward(verdict, fmt.ok, fmt.bad)
    actions = extract_actions(trace)
    mode = RewardMode(mode)
    if mode is RewardMode.VIRL:
        fid = trajectory_fidelity(actions, task.rationale, fp, rp)
    elif mode is RewardMode.NAIVE_STEPWISE:
        n = len(actions)
        fid = FidelityResult(naive_bonus * n, (naive_bonus,) * n, (0.0,) * n)
    else:
        n = len(actions)
        fid = FidelityResult(0.0, (0.0,) * n, (0.0,) * n)
    return RewardBreakdown(
        r_acc=r_acc,
        r_fmt=r_fmt,
        per_step_fid=fid.per_step_fid,
        per_step_penalty=fid.per_step_penalty,
        r_fid_bar=fid.r_fid_bar,
        r_total=r_acc + r_fmt + fid.r_fid_bar,
    )


def schedule_h0(
    s: ThresholdSchedule,
    train_step: int,
    recent_hit_rate: float = 0.0,
    current: float | None = None,
) -> float:
    """Fidelity threshold for ``train_step``.

    Linear mode interpolates ``h0_start -> h0_end`` over ``warmup_steps`` then holds.
    Competence mode is incremental: pass the previous value as ``current`` and it is
    raised by one ``increment`` when ``recent_hit_rate`` beats ``promotion_bar``.
    """
    if s.mode == "linear":
        if s.warmup_steps == 0 or train_step >= s.warmup_steps:
            return s.h0_end
        frac = max(train_step, 0) / s.warmup_steps
        return s.h0_start + (s.h0_end - s.h0_start) * frac
    h = s.h0_start if current is None else current
    if recent_hit_rate > s.promotion_bar:
        h += s.increment
    return min(max(h, s.h0_start), s.h0_end)
