"""Axis-aligned box arithmetic: IoU, ground-truth coverage, padding and NMS.

Coordinates are plain reals. Areas are continuous products ``(x2 - x1) * (y2 - y1)``,
so integer pixel boxes embed directly without any inclusive/exclusive convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence


class GeometryError(ValueError):
    """Raised for inputs that cannot be scored (e.g. zero-area ground truth)."""


@dataclass(frozen=True, slots=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise GeometryError(f"non-finite box coordinates: {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise GeometryError(f"inverted box: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def contains(self, other: "Box") -> bool:
        return (
            self.x1 <= other.x1
            and self.y1 <= other.y1
            and self.x2 >= other.x2
            and self.y2 >= other.y2
        )

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_seq(cls, values: Sequence[float]) -> "Box":
        if len(values) != 4:
            raise GeometryError(f"box needs 4 coordinates, got {len(values)}")
        return cls(*(float(v) for v in values))


@dataclass(frozen=True, slots=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self) -> None:
        if not math.isfinite(self.score):
            raise GeometryError(f"non-finite score: {self.score}")


def intersection_area(a: Box, b: Box) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: Box, b: Box) -> float:
    """Intersection over union; 0.0 when the union has zero area."""
    inter = intersection_area(a, b)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def coverage(pred: Box, gt: Box) -> float:
    """Fraction of ``gt``'s area covered by ``pred``."""
    gt_area = gt.area
    if gt_area <= 0.0:
        raise GeometryError("ground-truth box has zero area; coverage is undefined")
    return intersection_area(pred, gt) / gt_area


def clamp_box(b: Box, bounds: Box) -> Box:
    x1 = min(max(b.x1, bounds.x1), bounds.x2)
    y1 = min(max(b.y1, bounds.y1), bounds.y2)
    x2 = min(max(b.x2, bounds.x1), bounds.x2)
    y2 = min(max(b.y2, bounds.y1), bounds.y2)
    return Box(x1, y1, x2, y2)


def pad_box(b: Box, frac: float, bounds: Box) -> Box:
    """Grow each side outward by ``frac`` of the matching side length, then clamp."""
    if not math.isfinite(frac) or frac < 0:
        raise GeometryError(f"padding fraction must be finite and >= 0, got {frac}")
    if frac == 0:
        return clamp_box(b, bounds)
    dx = frac * b.width
    dy = frac * b.height
    return clamp_box(Box(b.x1 - dx, b.y1 - dy, b.x2 + dx, b.y2 + dy), bounds)


def nms(cands: Iterable[ScoredBox], iou_thresh: float) -> list[ScoredBox]:
    """Greedy non-maximum suppression.

    Candidates are visited by descending score (stable on ties, so equal scores keep
    input order). A candidate is dropped iff its IoU with an already-kept candidate
    exceeds ``iou_thresh``.
    """
    ordered = sorted(cands, key=lambda c: -c.score)
    kept: list[ScoredBox] = []
    for cand in ordered:
        if all(iou(cand.box, k.box) <= iou_thresh for k in kept):
            kept.append(cand)
    return kept
