"""Needle-search environment.

A ``W x H`` grid of glyph ids hides a target block holding the key glyph. The coarse
view only exposes a hint that matches the key with probability ``p_hint`` (the shortcut
channel); zooming on a region reveals the exact glyphs in it. Scattered distractor
glyphs from the other choices make imprecise zooms misleading.
"""

from __future__ import annotations

import math
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..geom import Box
from ..reward import answer_reward
from ..task import Task, choice_label
from ..trace import DEFAULT_TOOL_NAME, ZoomAction

BACKGROUND = 0


class EnvError(RuntimeError):
    pass


class EnvConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    grid_w: int = Field(8, ge=1)
    grid_h: int = Field(8, ge=1)
    n_glyphs: int = Field(8, ge=2, description="glyph classes, excluding background")
    n_choices: int = Field(4, ge=2)
    gt_min_cells: int = Field(2, ge=1)
    gt_max_cells: int = Field(2, ge=1)
    gt_stride: int = Field(2, ge=1)
    min_gt_frac: float = Field(0.01, gt=0, le=1)
    max_gt_frac: float = Field(0.25, gt=0, le=1)
    distractor_density: float = Field(0.25, gt=0, le=1)
    p_hint: float = Field(0.7, ge=0, le=1)
    max_rounds: int = Field(6, ge=0)

    @model_validator(mode="after")
    def _consistent(self) -> "EnvConfig":
        if self.n_choices > self.n_glyphs:
            raise ValueError("n_choices cannot exceed n_glyphs")
        if self.gt_min_cells > self.gt_max_cells:
            raise ValueError("gt_min_cells must be <= gt_max_cells")
        if self.min_gt_frac > self.max_gt_frac:
            raise ValueError("min_gt_frac must be <= max_gt_frac")
        return self

    @property
    def bounds(self) -> Box:
        return Box(0.0, 0.0, float(self.grid_w), float(self.grid_h))

    def gt_positions(self) -> list[tuple[int, int]]:
        """Top-left corners of target blocks; the question cue indexes this list."""
        s = self.gt_max_cells
        xs = range(0, self.grid_w - s + 1, self.gt_stride)
        ys = range(0, self.grid_h - s + 1, self.gt_stride)
        return [(x, y) for y in ys for x in xs]

    def gt_sizes(self) -> list[int]:
        area = self.grid_w * self.grid_h
        return [
            s
            for s in range(self.gt_min_cells, self.gt_max_cells + 1)
            if self.min_gt_frac <= s * s / area <= self.max_gt_frac
        ]


@dataclass(frozen=True)
class NeedleTask:
    task_id: str
    grid: tuple[tuple[int, ...], ...]  # grid[y][x]
    gt: Box
    cue: int
    key: int
    choices: tuple[int, ...]
    hint: int
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def width(self) -> int:
        return len(self.grid[0])

    @property
    def height(self) -> int:
        return len(self.grid)

    @property
    def bounds(self) -> Box:
        b = self._cache.get("bounds")
        if b is None:
            b = self._cache["bounds"] = Box(0.0, 0.0, float(self.width), float(self.height))
        return b

    @property
    def key_label(self) -> str:
        return choice_label(self.choices.index(self.key))

    def choice_texts(self) -> tuple[str, ...]:
        return tuple(f"glyph-{g}" for g in self.choices)

    def as_task(self) -> Task:
        t = self._cache.get("task")
        if t is None:
            t = Task(
                task_id=self.task_id,
                question=f"Which glyph fills target region #{self.cue}?",
                answer=self.key_label,
                choices=self.choice_texts(),
                rationale=self.gt,
                bounds=self.bounds,
            )
            self._cache["task"] = t
        return t

    def memo(self, key: tuple, compute: Callable[[], Any]) -> Any:
        """Per-task memo for values derived purely from the task."""
        hit = self._cache.get(key)
        if hit is None:
            hit = self._cache[key] = compute()
        return hit

    def cells_in(self, box: Box) -> list[tuple[int, int]]:
        x0 = max(0, math.floor(box.x1))
        y0 = max(0, math.floor(box.y1))
        x1 = min(self.width, math.ceil(box.x2))
        y1 = min(self.height, math.ceil(box.y2))
        if all(float(c).is_integer() for c in (box.x1, box.y1, box.x2, box.y2)):
            return [(x, y) for y in range(y0, y1) for x in range(x0, x1)]
        cells = []
        for y in range(y0, y1):
            for x in range(x0, x1):
                if min(box.x2, x + 1) - max(box.x1, x) > 0 and min(box.y2, y + 1) - max(box.y1, y) > 0:
                    cells.append((x, y))
        return cells

    def glyphs_in(self, box: Box) -> dict[tuple[int, int], int]:
        """Non-background glyphs in ``box`` keyed by cell."""
        key = (box.x1, box.y1, box.x2, box.y2)
        hit = self._cache.get(key)
        if hit is None:
            hit = {c: self.grid[c[1]][c[0]] for c in self.cells_in(box) if self.grid[c[1]][c[0]] != BACKGROUND}
            self._cache[key] = hit
        return hit


def generate_task(rng: random.Random, cfg: EnvConfig | None = None, task_id: str = "needle-0") -> NeedleTask:
    cfg = cfg or EnvConfig()
    sizes = cfg.gt_sizes()
    if cfg.gt_max_cells > min(cfg.grid_w, cfg.grid_h):
        raise EnvError(f"target block ({cfg.gt_max_cells} cells) does not fit the {cfg.grid_w}x{cfg.grid_h} grid")
    if not sizes:
        raise EnvError("no target size satisfies the configured area-fraction bounds")
    positions = cfg.gt_positions()
    cue = rng.randrange(len(positions))
    size = sizes[rng.randrange(len(sizes))]
    gx, gy = positions[cue]
    gt = Box(float(gx), float(gy), float(gx + size), float(gy + size))

    choices = tuple(rng.sample(range(1, cfg.n_glyphs + 1), cfg.n_choices))
    key = choices[rng.randrange(cfg.n_choices)]
    others = [c for c in choices if c != key]

    grid = [[BACKGROUND] * cfg.grid_w for _ in range(cfg.grid_h)]
    outside = []
    for y in range(cfg.grid_h):
        for x in range(cfg.grid_w):
            if gx <= x < gx + size and gy <= y < gy + size:
                grid[y][x] = key
            else:
                outside.append((x, y))
                if rng.random() < cfg.distractor_density:
                    grid[y][x] = others[rng.randrange(len(others))]
    if outside and not any(grid[y][x] != BACKGROUND for x, y in outside):
        x, y = outside[rng.randrange(len(outside))]
        grid[y][x] = others[rng.randrange(len(others))]

    if rng.random() < cfg.p_hint:
        hint = key
    else:
        hint = others[rng.randrange(len(others))]
    return NeedleTask(task_id, tuple(tuple(r) for r in grid), gt, cue, key, choices, hint)


@dataclass(frozen=True)
class CoarseObservation:
    hint: int
    grid_w: int
    grid_h: int
    cue: int


@dataclass(frozen=True)
class ZoomObservation:
    box: Box
    glyphs: dict[tuple[int, int], int]

    def counts(self) -> Counter:
        return Counter(self.glyphs.values())


@dataclass(frozen=True)
class Outcome:
    answer: str
    correct: bool
    zooms: int


class NeedleEnv:
    """One episode over a :class:`NeedleTask`."""

    def __init__(self, task: NeedleTask, max_rounds: int = 6, tool_name: str = DEFAULT_TOOL_NAME):
        self.task = task
        self.max_rounds = max_rounds
        self.tool_name = tool_name
        self.zooms = 0
        self.terminal = False

    def reset(self) -> CoarseObservation:
        self.zooms = 0
        self.terminal = False
        return CoarseObservation(self.task.hint, self.task.width, self.task.height, self.task.cue)

    def step(self, action: ZoomAction | str) -> ZoomObservation | Outcome:
        if self.terminal:
            raise EnvError("episode already terminated")
        if isinstance(action, ZoomAction):
            if self.zooms >= self.max_rounds:
                raise EnvError(f"zoom {self.zooms + 1} exceeds the {self.max_rounds}-round limit")
            if not self.task.bounds.contains(action.box):
                raise EnvError("zoom box outside the image")
            self.zooms += 1
            return ZoomObservation(action.box, self.task.glyphs_in(action.box))
        self.terminal = True
        task = self.task.as_task()
        correct = answer_reward(action, task.answer, task.choices) == 1.0
        return Outcome(action, correct, self.zooms)


def env_step(env: NeedleEnv, action: ZoomAction | str) -> ZoomObservation | Outcome:
    return env.step(action)
