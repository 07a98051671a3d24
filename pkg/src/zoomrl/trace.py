"""Multi-turn reasoning trace grammar.

A legal trace is one or more ``<think>..</think> <tool_call>..</tool_call>`` steps
terminated by ``<think>..</think> <answer>..</answer>``; a trace may also be a single
answer step. Whitespace between tags is ignored. Tool payloads are JSON objects::

    {"name": "image_zoom_in", "arguments": {"box": [x1, y1, x2, y2]}}

The parser never raises. Malformed input yields the longest valid prefix of steps plus
a :class:`FormatVerdict` listing what went wrong.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Any

from .geom import Box, GeometryError

THINK_OPEN, THINK_CLOSE = "<think>", "</think>"
TOOL_OPEN, TOOL_CLOSE = "<tool_call>", "</tool_call>"
ANSWER_OPEN, ANSWER_CLOSE = "<answer>", "</answer>"
_TAGS = (THINK_OPEN, THINK_CLOSE, TOOL_OPEN, TOOL_CLOSE, ANSWER_OPEN, ANSWER_CLOSE)

DEFAULT_TOOL_NAME = "image_zoom_in"
DEFAULT_MAX_ROUNDS = 6


class TraceError(ValueError):
    pass


class Violation(str, Enum):
    UNCLOSED_TAG = "unclosed-tag"
    ANSWER_WITH_TOOL = "answer-with-tool"
    MISSING_THINK = "missing-think"
    MISSING_ACTION = "missing-action"
    MISSING_ANSWER = "missing-answer"
    BAD_TOOL_PAYLOAD = "bad-tool-payload"
    TRAILING_GARBAGE = "trailing-garbage"
    OVER_ROUND_LIMIT = "over-round-limit"


@dataclass(frozen=True)
class TraceConfig:
    tool_name: str = DEFAULT_TOOL_NAME
    max_rounds: int = DEFAULT_MAX_ROUNDS
    bounds: Box | None = None


@dataclass(frozen=True, slots=True)
class ZoomAction:
    name: str
    box: Box


@dataclass(frozen=True, slots=True)
class TraceStep:
    think: str
    zoom: ZoomAction | None = None
    answer: str | None = None

    def __post_init__(self) -> None:
        if not self.think.strip():
            raise TraceError("every step needs a nonempty think segment")
        if (self.zoom is None) == (self.answer is None):
            raise TraceError("a step carries exactly one of a zoom action or an answer")

    @property
    def is_visual(self) -> bool:
        return self.zoom is not None

    def to_json(self) -> dict[str, Any]:
        if self.zoom is not None:
            return {"think": self.think, "zoom": {"name": self.zoom.name, "box": self.zoom.box.to_list()}}
        return {"think": self.think, "answer": self.answer}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "TraceStep":
        zoom = obj.get("zoom")
        return cls(
            think=obj["think"],
            zoom=ZoomAction(zoom["name"], Box.from_seq(zoom["box"])) if zoom is not None else None,
            answer=obj.get("answer"),
        )


@dataclass(frozen=True)
class Trace:
    steps: tuple[TraceStep, ...] = ()

    @property
    def answer(self) -> str | None:
        if self.steps and self.steps[-1].answer is not None:
            return self.steps[-1].answer
        return None

    @property
    def complete(self) -> bool:
        return self.answer is not None

    @property
    def zoom_count(self) -> int:
        return sum(1 for s in self.steps if s.zoom is not None)

    def to_json(self) -> dict[str, Any]:
        return {"steps": [s.to_json() for s in self.steps]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Trace":
        return cls(tuple(TraceStep.from_json(s) for s in obj["steps"]))


@dataclass(frozen=True)
class FormatVerdict:
    violations: tuple[Violation, ...] = field(default_factory=tuple)

    @property
    def well_formed(self) -> bool:
        return not self.violations

    def to_json(self) -> dict[str, Any]:
        return {"well_formed": self.well_formed, "violations": [v.value for v in self.violations]}

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "FormatVerdict":
        return cls(tuple(Violation(v) for v in obj.get("violations", [])))


_WS = re.compile(r"\s*")


def _skip_ws(raw: str, pos: int) -> int:
    return _WS.match(raw, pos).end()


@lru_cache(maxsize=4096)
def _parse_payload(text: str, cfg: TraceConfig) -> ZoomAction | None:
    try:
        obj = json.loads(text)
    except (json.JSONDecodeError, RecursionError):
        return None
    if not isinstance(obj, dict) or obj.get("name") != cfg.tool_name:
        return None
    args = obj.get("arguments")
    if not isinstance(args, dict):
        return None
    coords = args.get("box")
    if not isinstance(coords, list) or len(coords) != 4:
        return None
    if not all(isinstance(c, (int, float)) and not isinstance(c, bool) for c in coords):
        return None
    if not all(math.isfinite(c) for c in coords):
        return None
    try:
        box = Box.from_seq(coords)
    except GeometryError:
        return None
    if cfg.bounds is not None and not cfg.bounds.contains(box):
        return None
    return ZoomAction(cfg.tool_name, box)


def parse_trace(raw: str, cfg: TraceConfig | None = None) -> tuple[Trace, FormatVerdict]:
    cfg = cfg or TraceConfig()
    steps: list[TraceStep] = []
    n_zoom = 0
    pos = 0
    n = len(raw)

    def done(*violations: Violation) -> tuple[Trace, FormatVerdict]:
        return Trace(tuple(steps)), FormatVerdict(tuple(violations))

    while True:
        pos = _skip_ws(raw, pos)
        if pos >= n:
            return done(Violation.MISSING_ANSWER)
        if not raw.startswith(THINK_OPEN, pos):
            if raw.startswith(TOOL_OPEN, pos) or raw.startswith(ANSWER_OPEN, pos):
                return done(Violation.MISSING_THINK)
            return done(Violation.TRAILING_GARBAGE)
        end = raw.find(THINK_CLOSE, pos + len(THINK_OPEN))
        if end < 0:
            return done(Violation.UNCLOSED_TAG)
        think = raw[pos + len(THINK_OPEN):end].strip()
        if not think:
            return done(Violation.MISSING_THINK)
        pos = _skip_ws(raw, end + len(THINK_CLOSE))

        if raw.startswith(TOOL_OPEN, pos):
            end = raw.find(TOOL_CLOSE, pos + len(TOOL_OPEN))
            if end < 0:
                return done(Violation.UNCLOSED_TAG)
            zoom = _parse_payload(raw[pos + len(TOOL_OPEN):end], cfg)
            if zoom is None:
                return done(Violation.BAD_TOOL_PAYLOAD)
            if n_zoom >= cfg.max_rounds:
                return done(Violation.OVER_ROUND_LIMIT)
            steps.append(TraceStep(think, zoom=zoom))
            n_zoom += 1
            pos = _skip_ws(raw, end + len(TOOL_CLOSE))
            if raw.startswith(ANSWER_OPEN, pos):
                return done(Violation.ANSWER_WITH_TOOL)
            continue

        if raw.startswith(ANSWER_OPEN, pos):
            end = raw.find(ANSWER_CLOSE, pos + len(ANSWER_OPEN))
            if end < 0:
                return done(Violation.UNCLOSED_TAG)
            steps.append(TraceStep(think, answer=raw[pos + len(ANSWER_OPEN):end].strip()))
            pos = _skip_ws(raw, end + len(ANSWER_CLOSE))
            if pos < n:
                return done(Violation.TRAILING_GARBAGE)
            return done()

        if pos >= n:
            return done(Violation.MISSING_ANSWER)
        if raw.startswith(THINK_OPEN, pos):
            return done(Violation.MISSING_ACTION)
        return done(Violation.TRAILING_GARBAGE)


def _check_text(text: str, what: str) -> None:
    if text != text.strip():
        raise TraceError(f"{what} text has surrounding whitespace and would not round-trip")
    if "<" in text and any(tag in text for tag in _TAGS):
        raise TraceError(f"{what} text contains a reserved tag")


def validate_trace(t: Trace, cfg: TraceConfig | None = None, *, allow_partial: bool = False) -> None:
    cfg = cfg or TraceConfig()
    if not t.steps:
        raise TraceError("trace has no steps")
    for i, step in enumerate(t.steps):
        if step.answer is not None and i != len(t.steps) - 1:
            raise TraceError("answer step must terminate the trace")
        if step.zoom is not None:
            if step.zoom.name != cfg.tool_name:
                raise TraceError(f"tool name {step.zoom.name!r} != {cfg.tool_name!r}")
            if cfg.bounds is not None and not cfg.bounds.contains(step.zoom.box):
                raise TraceError("zoom box outside image bounds")
    if t.zoom_count > cfg.max_rounds:
        raise TraceError(f"{t.zoom_count} zooms exceed the {cfg.max_rounds}-round limit")
    if not allow_partial and not t.complete:
        raise TraceError("trace has no terminal answer")


@lru_cache(maxsize=4096)
def _payload_text(zoom: ZoomAction) -> str:
    return json.dumps({"name": zoom.name, "arguments": {"box": zoom.box.to_list()}})


def render_step(step: TraceStep) -> str:
    _check_text(step.think, "think")
    if step.zoom is not None:
        return f"{THINK_OPEN}{step.think}{THINK_CLOSE} {TOOL_OPEN}{_payload_text(step.zoom)}{TOOL_CLOSE}"
    assert step.answer is not None
    _check_text(step.answer, "answer")
    return f"{THINK_OPEN}{step.think}{THINK_CLOSE} {ANSWER_OPEN}{step.answer}{ANSWER_CLOSE}"


def render_trace(t: Trace, cfg: TraceConfig | None = None, *, allow_partial: bool = False) -> str:
    """Canonical serialization; ``parse_trace`` of the result reproduces ``t``."""
    validate_trace(t, cfg, allow_partial=allow_partial)
    return "\n".join(render_step(s) for s in t.steps)


def extract_actions(t: Trace) -> list[ZoomAction]:
    return [s.zoom for s in t.steps if s.zoom is not None]


def format_reward(v: FormatVerdict, ok: float = 0.5, bad: float = -0.5) -> float:
    return ok if v.well_formed else bad


def trace_record(task_id: str, raw: str, trace: Trace, verdict: FormatVerdict) -> dict[str, Any]:
    """One JSON-lines trace record."""
    return {"task_id": task_id, "raw_text": raw, "parsed": trace.to_json(), "verdict": verdict.to_json()}
