"""Run configuration: one validated tree covering reward, credit, simulation and curation."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .credit import ModulatorParams
from .reward import FidelityParams, FormatParams, RedundancyParams, RewardMode, ThresholdSchedule
from .sim.env import EnvConfig


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


class RewardSection(_Section):
    fidelity: FidelityParams = FidelityParams()
    redundancy: RedundancyParams = RedundancyParams()
    format: FormatParams = FormatParams()
    schedule: ThresholdSchedule | None = ThresholdSchedule()
    naive_bonus: float = Field(0.5, allow_inf_nan=False)


class CreditSection(_Section):
    modulator: ModulatorParams = ModulatorParams()
    eps_low: float = Field(0.2, gt=0, lt=1)
    eps_high: float = Field(0.28, gt=0, lt=1)
    std_normalize: bool = False


class SimSection(_Section):
    env: EnvConfig = EnvConfig()
    reward_mode: RewardMode = RewardMode.VIRL
    iterations: int = Field(300, ge=0)
    batch_size: int = Field(4, ge=1)
    group_size: int = Field(16, ge=1)
    lr: float = Field(8.0, ge=0, allow_inf_nan=False)
    epochs: int = Field(1, ge=1)
    anchor_sizes: tuple[int, ...] = (2, 4, 8)
    anchor_stride: int = Field(2, ge=1)
    init_grounding: float = Field(2.0, ge=0, allow_inf_nan=False)
    init_stop_logit: float = 0.0
    init_w_hint: float = 1.0
    init_w_obs: float = 2.0
    max_resample_rounds: int = Field(2, ge=0)
    final_window: int = Field(10, ge=1)
    temperature: float = Field(1.0, ge=0)


class CurateSection(_Section):
    pad_frac: float = Field(0.1, ge=0, allow_inf_nan=False)
    nms_iou: float = Field(0.5, ge=0, le=1)
    max_area_frac: float = Field(0.25, gt=0, le=1)
    attempts: int = Field(8, ge=1)
    min_distractors: int = Field(3, ge=1)
    max_distractors: int = Field(7, ge=1)
    rollout_seed: int = 0


class PathsSection(_Section):
    out_dir: str = "runs"


class RunConfig(_Section):
    seed: int = 0
    prompt_template: Literal["clear", "ambiguous"] = "clear"
    reward: RewardSection = RewardSection()
    credit: CreditSection = CreditSection()
    sim: SimSection = SimSection()
    curate: CurateSection = CurateSection()
    paths: PathsSection = PathsSection()

    def dump(self) -> dict[str, Any]:
        return self.model_dump(mode="json")

    def with_overrides(self, **updates: Any) -> "RunConfig":
        """Apply dotted-path overrides, e.g. ``{"sim.reward_mode": "virl"}``; revalidates."""
        data = self.dump()
        for dotted, value in updates.items():
            node = data
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node[p]
            node[leaf] = value
        return RunConfig.model_validate(data)


class ConfigValidationError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _problems(err: ValidationError) -> list[str]:
    return [f"{'.'.join(str(p) for p in e['loc']) or '<root>'}: {e['msg']}" for e in err.errors()]


def parse_config(data: dict[str, Any] | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigValidationError(_problems(err)) from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text)
    if data is not None and not isinstance(data, dict):
        raise ConfigValidationError(["<root>: config must be a mapping"])
    return parse_config(data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.dump(), sort_keys=True)
