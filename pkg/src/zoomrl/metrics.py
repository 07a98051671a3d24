"""Answer/rationale accuracy, rationale count, F1, and illusion diagnostics."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

from .geom import GeometryError, coverage
from .reward import answer_reward
from .task import Task
from .trace import Trace, extract_actions


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class TraceScore:
    task_id: str
    answer_correct: bool
    zoom_count: int
    best_coverage: float | None = None

    def __post_init__(self) -> None:
        if (self.best_coverage is None) != (self.zoom_count == 0):
            raise MetricsError("best_coverage is defined iff the trace has at least one zoom")


def score_trace(trace: Trace, task: Task) -> TraceScore:
    if task.rationale.area <= 0:
        raise GeometryError(f"task {task.task_id}: zero-area rationale")
    actions = extract_actions(trace)
    best = max((coverage(a.box, task.rationale) for a in actions), default=None)
    correct = answer_reward(trace.answer, task.answer, task.choices) == 1.0
    return TraceScore(task.task_id, correct, len(actions), best)


def f1(acc_ans: float, acc_rat: float) -> float:
    if acc_ans + acc_rat == 0:
        return 0.0
    return 2.0 * acc_ans * acc_rat / (acc_ans + acc_rat)


@dataclass(frozen=True)
class CorpusReport:
    n: int
    acc_ans: float
    acc_rat: float
    c_rat: float
    f1: float
    right_with: int
    right_without: int
    wrong_with: int
    wrong_without: int
    no_rationale: bool = False
    hit_threshold: float | None = None

    @property
    def with_rationale(self) -> int:
        return self.right_with + self.wrong_with

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def aggregate(scores: Sequence[TraceScore], hit_threshold: float | None = None) -> CorpusReport:
    """Corpus metrics.

    ``acc_rat`` averages best coverage over traces with at least one zoom; with
    ``hit_threshold`` set it becomes the fraction whose coverage reaches the threshold.
    """
    if not scores:
        raise MetricsError("cannot aggregate an empty corpus")
    n = len(scores)
    acc_ans = sum(s.answer_correct for s in scores) / n
    c_rat = sum(s.zoom_count for s in scores) / n
    covs = [s.best_coverage for s in scores if s.best_coverage is not None]
    if hit_threshold is not None:
        covs = [1.0 if c >= hit_threshold else 0.0 for c in covs]
    acc_rat = sum(covs) / len(covs) if covs else 0.0
    quad = {"right_with": 0, "right_without": 0, "wrong_with": 0, "wrong_without": 0}
    for s in scores:
        key = ("right" if s.answer_correct else "wrong") + ("_with" if s.zoom_count else "_without")
        quad[key] += 1
    return CorpusReport(
        n=n,
        acc_ans=acc_ans,
        acc_rat=acc_rat,
        c_rat=c_rat,
        f1=f1(acc_ans, acc_rat),
        no_rationale=not covs,
        hit_threshold=hit_threshold,
        **quad,
    )


@dataclass(frozen=True)
class IllusionSummary:
    rates: dict[str, float]
    illusion_index: float
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return asdict(self)


def diagnose(report: CorpusReport) -> IllusionSummary:
    """Quadrant rates and the illusion index: wrong answers among traces that zoomed."""
    n = max(1, report.n)
    rates = {
        "right_with": report.right_with / n,
        "right_without": report.right_without / n,
        "wrong_with": report.wrong_with / n,
        "wrong_without": report.wrong_without / n,
    }
    warnings = []
    if report.with_rationale == 0:
        warnings.append("no-rationale: no trace invoked a zoom; illusion index is vacuous")
    if report.right_without > 0 and report.right_without == report.n:
        warnings.append("rationale-usage: every answer was produced without visual evidence")
    index = report.wrong_with / max(1, report.with_rationale)
    return IllusionSummary(rates, index, warnings)
