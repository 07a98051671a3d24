"""Bi-level credit assignment: group-relative trajectory advantages, rationale-class
modulation, token broadcast, clipped surrogate and dynamic-sampling filter."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .reward import RewardBreakdown
from .trace import Trace


class StepClass(str, Enum):
    TEXTUAL = "textual"
    GOOD_VISUAL = "good_visual"
    BAD_VISUAL = "bad_visual"


class ModulatorParams(BaseModel):
    """Advantage multipliers indexed by (rationale class, sign of the trajectory advantage).

    In advantageous trajectories good zooms are amplified and bad ones attenuated; in
    disadvantageous ones bad zooms take amplified blame and good ones reduced blame.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    h_good_pos: float = Field(1.2, gt=0, allow_inf_nan=False)
    h_bad_pos: float = Field(0.6, gt=0, allow_inf_nan=False)
    h_good_neg: float = Field(0.6, gt=0, allow_inf_nan=False)
    h_bad_neg: float = Field(1.2, gt=0, allow_inf_nan=False)

    @model_validator(mode="after")
    def _amplify_attenuate(self) -> "ModulatorParams":
        if not self.h_good_pos > 1 > self.h_bad_pos:
            raise ValueError("need h_good_pos > 1 > h_bad_pos")
        if not self.h_bad_neg > 1 > self.h_good_neg:
            raise ValueError("need h_bad_neg > 1 > h_good_neg")
        return self

    def factor(self, cls: StepClass, a_traj: float) -> float:
        if cls is StepClass.TEXTUAL:
            return 1.0
        good = cls is StepClass.GOOD_VISUAL
        if a_traj > 0:
            return self.h_good_pos if good else self.h_bad_pos
        return self.h_good_neg if good else self.h_bad_neg


class CreditError(ValueError):
    pass


def group_advantages(rewards: Sequence[float], std_normalize: bool = False, eps: float = 1e-6) -> list[float]:
    """``A_i = R_i - mean(R)``; optionally divided by the group std (off by default)."""
    if not rewards:
        raise CreditError("empty group")
    g = len(rewards)
    mean = math.fsum(rewards) / g
    adv = [r - mean for r in rewards]
    if std_normalize and g > 1:
        std = math.sqrt(math.fsum(a * a for a in adv) / (g - 1))
        adv = [a / (std + eps) for a in adv]
    return adv


def classify_steps(trace: Trace, breakdown: RewardBreakdown) -> list[StepClass]:
    n_zoom = trace.zoom_count
    if n_zoom != len(breakdown.per_step_fid):
        raise CreditError(f"trace has {n_zoom} zooms but breakdown scores {len(breakdown.per_step_fid)}")
    out: list[StepClass] = []
    k = 0
    for step in trace.steps:
        if step.zoom is None:
            out.append(StepClass.TEXTUAL)
        else:
            out.append(StepClass.GOOD_VISUAL if breakdown.per_step_fid[k] > 0 else StepClass.BAD_VISUAL)
            k += 1
    return out


@dataclass(frozen=True)
class StepAdvantage:
    index: int
    cls: StepClass
    a_hat: float


@dataclass(frozen=True)
class AdvantageProfile:
    a_traj: float
    per_step: tuple[StepAdvantage, ...]
    per_token: tuple[float, ...] | None = field(default=None)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "a_traj": self.a_traj,
            "per_step": [{"index": s.index, "class": s.cls.value, "a_hat": s.a_hat} for s in self.per_step],
        }
        if self.per_token is not None:
            out["per_token"] = list(self.per_token)
        return out


def modulate(a_traj: float, classes: Sequence[StepClass], p: ModulatorParams | None = None) -> AdvantageProfile:
    p = p or ModulatorParams()
    steps = []
    for i, cls in enumerate(classes):
        a_hat = 0.0 if a_traj == 0 else a_traj * p.factor(cls, a_traj)
        steps.append(StepAdvantage(i, cls, a_hat))
    return AdvantageProfile(a_traj, tuple(steps))


def broadcast_to_tokens(profile: AdvantageProfile, seg: Sequence[tuple[int, int]]) -> list[float]:
    """Repeat each step's advantage over its tokens; ``seg`` is (step index, token count)."""
    n = len(profile.per_step)
    seen = sorted(i for i, _ in seg)
    if seen != list(range(n)):
        raise CreditError(f"segmentation covers steps {seen}, expected each of 0..{n - 1} once")
    by_index = {s.index: s.a_hat for s in profile.per_step}
    out: list[float] = []
    for idx, count in seg:
        if count < 0:
            raise CreditError(f"negative token count for step {idx}")
        out.extend([by_index[idx]] * count)
    return out


def _check_ratio(ratio: float) -> None:
    if not ratio > 0:
        raise CreditError(f"probability ratio must be positive, got {ratio}")


def clipped_surrogate(ratio: float, a_hat: float, eps_low: float = 0.2, eps_high: float = 0.28) -> float:
    """Per-token PPO surrogate with asymmetric (clip-higher) bounds; to be maximized."""
    _check_ratio(ratio)
    clipped = min(max(ratio, 1.0 - eps_low), 1.0 + eps_high)
    return min(ratio * a_hat, clipped * a_hat)


def clipped_surrogate_grad(ratio: float, a_hat: float, eps_low: float = 0.2, eps_high: float = 0.28) -> float:
    """Derivative of :func:`clipped_surrogate` with respect to ``ratio``.

    Zero where the clipped branch is selected and the clip is active.
    """
    _check_ratio(ratio)
    lo, hi = 1.0 - eps_low, 1.0 + eps_high
    clipped = min(max(ratio, lo), hi)
    if ratio * a_hat <= clipped * a_hat:
        return a_hat
    return 0.0


def group_is_informative(rewards: Sequence[float]) -> bool:
    """Dynamic-sampling rule: keep a group only if its rewards are not all equal."""
    return len(rewards) > 1 and any(r != rewards[0] for r in rewards)


def dynamic_sample_filter(group: "GroupRollout") -> bool:
    return group_is_informative([bd.r_total for _, bd in group.rollouts])


@dataclass(frozen=True)
class GroupRollout:
    task_id: str
    rollouts: tuple[tuple[Trace, RewardBreakdown], ...]

    def __post_init__(self) -> None:
        if not self.rollouts:
            raise CreditError("a group needs at least one rollout")

    @property
    def rewards(self) -> list[float]:
        return [bd.r_total for _, bd in self.rollouts]


def group_profiles(
    group: GroupRollout,
    p: ModulatorParams | None = None,
    *,
    modulated: bool = True,
    std_normalize: bool = False,
) -> list[AdvantageProfile]:
    """Per-rollout advantage profiles for one group (plain GRPO when ``modulated`` is off)."""
    adv = group_advantages(group.rewards, std_normalize=std_normalize)
    out = []
    for a, (trace, bd) in zip(adv, group.rollouts):
        classes = classify_steps(trace, bd)
        if modulated:
            out.append(modulate(a, classes, p))
        else:
            steps = tuple(StepAdvantage(i, c, a) for i, c in enumerate(classes))
            out.append(AdvantageProfile(a, steps))
    return out
