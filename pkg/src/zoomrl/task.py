from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .geom import Box, GeometryError


def choice_label(index: int) -> str:
    return chr(ord("A") + index)


@dataclass(frozen=True)
class Task:
    """A multiple-choice query with its reference rationale region.

    ``answer`` is the key: either a choice label ("B") or the full choice text.
    ``rationale`` is stored exactly as rewards should use it (datasets pad it once,
    at construction time).
    """

    task_id: str
    question: str
    answer: str
    choices: tuple[str, ...]
    rationale: Box
    bounds: Box | None = None
    weight: float = 1.0
    meta: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if self.bounds is not None and not self.bounds.contains(self.rationale):
            raise GeometryError(f"task {self.task_id}: rationale outside image bounds")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "task_id": self.task_id,
            "question": self.question,
            "answer": self.answer,
            "choices": list(self.choices),
            "rationale": self.rationale.to_list(),
            "bounds": self.bounds.to_list() if self.bounds is not None else None,
            "weight": self.weight,
        }
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Task":
        bounds = obj.get("bounds")
        return cls(
            task_id=str(obj["task_id"]),
            question=str(obj.get("question", "")),
            answer=str(obj["answer"]),
            choices=tuple(str(c) for c in obj["choices"]),
            rationale=Box.from_seq(obj["rationale"]),
            bounds=Box.from_seq(bounds) if bounds is not None else None,
            weight=float(obj.get("weight", 1.0)),
            meta=dict(obj.get("meta", {})),
        )
