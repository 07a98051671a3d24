"""Dataset curation: generate grounded questions from region captions, verify them,
filter out shortcut-solvable items and repackage survivors as multiple choice.

Model-dependent stages sit behind small ports. The shipped backends are deterministic
stand-ins: a rule-based generator over ``"<attribute> <object>"`` captions, an oracle
verifier that reads a hidden truth field on each record, and a Bernoulli rollout stub.
"""

from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence

from .geom import Box, GeometryError, ScoredBox, nms, pad_box
from .seeding import py_rng
from .task import Task, choice_label

log = logging.getLogger(__name__)

MIN_DISTRACTORS, MAX_DISTRACTORS = 3, 7
WITH_HINT, WITHOUT_GROUNDING = "with_hint", "without_grounding"

# attribute vocabularies the rule-based generator understands; each is also the
# distractor pool for answers of that kind
ATTRIBUTES: dict[str, tuple[str, ...]] = {
    "color": ("red", "blue", "green", "yellow", "black", "white", "orange", "purple", "brown", "gray"),
    "material": ("wooden", "metal", "plastic", "glass", "stone", "paper", "leather", "ceramic", "rubber"),
    "pattern": ("striped", "dotted", "checkered", "plain", "floral", "plaid", "zigzag", "spotted"),
}
OBJECTS = ("car", "cup", "sign", "chair", "bag", "lamp", "book", "bottle", "hat", "box", "kite", "bench")
_KIND_OF = {v: kind for kind, values in ATTRIBUTES.items() for v in values}


class PipelineError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegionRecord:
    record_id: str
    image_id: str
    global_caption: str
    local_caption: str
    region: Box
    bounds: Box
    truth: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        if not self.bounds.contains(self.region):
            raise GeometryError(f"record {self.record_id}: region outside image bounds")

    def to_json(self) -> dict[str, Any]:
        return {
            "record_id": self.record_id,
            "image_id": self.image_id,
            "global_caption": self.global_caption,
            "local_caption": self.local_caption,
            "region": self.region.to_list(),
            "bounds": self.bounds.to_list(),
            "truth": self.truth,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "RegionRecord":
        return cls(
            record_id=str(obj["record_id"]),
            image_id=str(obj.get("image_id", obj["record_id"])),
            global_caption=str(obj.get("global_caption", "")),
            local_caption=str(obj["local_caption"]),
            region=Box.from_seq(obj["region"]),
            bounds=Box.from_seq(obj["bounds"]),
            truth=dict(obj.get("truth", {})),
        )


@dataclass(frozen=True)
class TaskCandidate:
    question: str
    answer: str
    rationale: Box
    bounds: Box
    record_id: str
    image_id: str = ""
    kind: str = ""
    confidence: float = 1.0
    distractors: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.question.strip():
            raise PipelineError(f"candidate from {self.record_id}: empty question")
        if not self.bounds.contains(self.rationale):
            raise GeometryError(f"candidate from {self.record_id}: rationale outside image bounds")


@dataclass(frozen=True)
class Verdict:
    answer_ok: bool
    rationale_ok: bool


class GeneratorPort(Protocol):
    def generate(self, record: RegionRecord) -> TaskCandidate | None: ...


class VerifierPort(Protocol):
    def verify(self, cand: TaskCandidate, image: RegionRecord) -> Verdict: ...


class RolloutPort(Protocol):
    def attempt(self, cand: TaskCandidate, mode: str) -> bool: ...


class RuleGenerator:
    """Turns ``"<attribute> <object>"`` captions into attribute questions."""

    def generate(self, record: RegionRecord) -> TaskCandidate | None:
        words = record.local_caption.lower().split()
        if len(words) != 2 or words[0] not in _KIND_OF:
            return None
        attr, obj = words
        kind = _KIND_OF[attr]
        return TaskCandidate(
            question=f"What {kind} is the {obj} in the image?",
            answer=attr,
            rationale=record.region,
            bounds=record.bounds,
            record_id=record.record_id,
            image_id=record.image_id,
            kind=kind,
            confidence=float(record.truth.get("confidence", 1.0)),
        )


class OracleVerifier:
    """Reads the hidden ``answer_ok`` / ``rationale_ok`` flags of the source record."""

    def verify(self, cand: TaskCandidate, image: RegionRecord) -> Verdict:
        return Verdict(bool(image.truth.get("answer_ok", True)), bool(image.truth.get("rationale_ok", True)))


class BernoulliRollout:
    """Succeeds with the record's ``shortcut_p`` (without grounding) or ``hint_p``.

    Streams are keyed by (rollout seed, record id, mode), never by the pipeline seed,
    so reshuffling answer choices does not change which candidates are kept.
    """

    def __init__(self, records: dict[str, RegionRecord], seed: int = 0):
        self.records = records
        self.seed = seed
        self._streams: dict[tuple[str, str], random.Random] = {}

    def attempt(self, cand: TaskCandidate, mode: str) -> bool:
        if mode not in (WITH_HINT, WITHOUT_GROUNDING):
            raise PipelineError(f"unknown rollout mode {mode!r}")
        key = (cand.record_id, mode)
        rng = self._streams.get(key)
        if rng is None:
            rng = self._streams[key] = py_rng(self.seed, "attempt", *key)
        truth = self.records[cand.record_id].truth
        p = float(truth.get("shortcut_p", 0.0) if mode == WITHOUT_GROUNDING else truth.get("hint_p", 1.0))
        return rng.random() < p


@dataclass
class StageLog:
    """Per-stage counts and rejection reasons."""

    counts: dict[str, int] = field(default_factory=dict)
    rejections: dict[str, Counter] = field(default_factory=dict)

    def reject(self, stage: str, reason: str, item: str) -> None:
        self.rejections.setdefault(stage, Counter())[reason] += 1
        log.debug("%s: rejected %s (%s)", stage, item, reason)

    def to_json(self) -> dict[str, Any]:
        return {
            "counts": dict(self.counts),
            "rejections": {s: dict(sorted(c.items())) for s, c in sorted(self.rejections.items())},
        }


def generate(
    records: Sequence[RegionRecord],
    port: GeneratorPort,
    pad_frac: float = 0.1,
    nms_iou: float = 0.5,
    stages: StageLog | None = None,
) -> list[TaskCandidate]:
    """One padded candidate per record, then NMS over rationale boxes within each image."""
    stages = stages if stages is not None else StageLog()
    cands: list[TaskCandidate] = []
    for rec in records:
        try:
            cand = port.generate(rec)
        except Exception as err:  # noqa: BLE001 - any backend failure skips the record
            stages.reject("generate", f"port-error:{type(err).__name__}", rec.record_id)
            continue
        if cand is None:
            stages.reject("generate", "declined", rec.record_id)
            continue
        cands.append(replace(cand, rationale=pad_box(cand.rationale, pad_frac, cand.bounds)))

    by_image: dict[str, list[int]] = {}
    for i, c in enumerate(cands):
        by_image.setdefault(c.image_id, []).append(i)
    keep: set[int] = set()
    for idx in by_image.values():
        scored = [ScoredBox(cands[i].rationale, cands[i].confidence) for i in idx]
        survivors = {id(s) for s in nms(scored, nms_iou)}
        keep.update(i for i, s in zip(idx, scored) if id(s) in survivors)
    out = [c for i, c in enumerate(cands) if i in keep]
    for i, c in enumerate(cands):
        if i not in keep:
            stages.reject("generate", "nms-duplicate", c.record_id)
    return out


def verify(
    cands: Sequence[TaskCandidate],
    port: VerifierPort,
    images: dict[str, RegionRecord],
    stages: StageLog | None = None,
) -> list[TaskCandidate]:
    stages = stages if stages is not None else StageLog()
    kept = []
    for c in cands:
        try:
            v = port.verify(c, images[c.record_id])
        except Exception as err:  # noqa: BLE001
            stages.reject("verify", f"port-error:{type(err).__name__}", c.record_id)
            continue
        if not v.answer_ok:
            stages.reject("verify", "answer-inconsistent", c.record_id)
        elif not v.rationale_ok:
            stages.reject("verify", "rationale-inconsistent", c.record_id)
        else:
            kept.append(c)
    return kept


def linear_keep_weight(solve_rate: float) -> float:
    return 1.0 - solve_rate


@dataclass(frozen=True)
class WeightedCandidate:
    cand: TaskCandidate
    weight: float
    solve_rate: float


def filter_reasoning_centric(
    cands: Sequence[TaskCandidate],
    port: RolloutPort,
    max_area_frac: float = 0.25,
    attempts: int = 8,
    keep_prob_fn: Callable[[float], float] = linear_keep_weight,
    stages: StageLog | None = None,
) -> list[WeightedCandidate]:
    """Drop oversized rationales, then weight by how often the question is solved
    without looking at the region; weight 0 drops the candidate."""
    if attempts < 1:
        raise PipelineError("attempts must be >= 1")
    stages = stages if stages is not None else StageLog()
    out = []
    for c in cands:
        if c.rationale.area / c.bounds.area > max_area_frac:
            stages.reject("filter", "rationale-too-large", c.record_id)
            continue
        try:
            solved = sum(port.attempt(c, WITHOUT_GROUNDING) for _ in range(attempts))
        except Exception as err:  # noqa: BLE001
            stages.reject("filter", f"port-error:{type(err).__name__}", c.record_id)
            continue
        rate = solved / attempts
        w = keep_prob_fn(rate)
        if w <= 0:
            stages.reject("filter", "solvable-without-grounding", c.record_id)
            continue
        out.append(WeightedCandidate(c, w, rate))
    return out


def distractor_pool(cand: TaskCandidate) -> tuple[str, ...]:
    return tuple(v for v in ATTRIBUTES.get(cand.kind, ()) if v != cand.answer)


def repackage_mcq(
    cand: TaskCandidate,
    pool: Sequence[str],
    k_rng: random.Random,
    task_id: str | None = None,
    weight: float = 1.0,
    k: int | None = None,
) -> Task:
    """Draw ``k`` distractors (uniform in [3, 7] unless forced) and shuffle the answer in."""
    distinct = sorted({d for d in pool if d != cand.answer})
    if len(distinct) < MIN_DISTRACTORS:
        raise PipelineError(f"{cand.record_id}: need >= {MIN_DISTRACTORS} distractors, pool has {len(distinct)}")
    if k is None:
        k = k_rng.randint(MIN_DISTRACTORS, MAX_DISTRACTORS)
    if not MIN_DISTRACTORS <= k <= MAX_DISTRACTORS:
        raise PipelineError(f"distractor count {k} outside [{MIN_DISTRACTORS}, {MAX_DISTRACTORS}]")
    if len(distinct) < k:
        raise PipelineError(f"{cand.record_id}: pool of {len(distinct)} cannot supply {k} distractors")
    picked = k_rng.sample(distinct, k)
    choices = picked + [cand.answer]
    k_rng.shuffle(choices)
    key = choice_label(choices.index(cand.answer))
    listing = " ".join(f"({choice_label(i)}) {c}" for i, c in enumerate(choices))
    return Task(
        task_id=task_id or cand.record_id,
        question=f"{cand.question} Choices: {listing}",
        answer=key,
        choices=tuple(choices),
        rationale=cand.rationale,
        bounds=cand.bounds,
        weight=weight,
        meta={"record_id": cand.record_id},
    )


@dataclass
class CurateResult:
    tasks: list[Task]
    manifest: dict[str, Any]


def curate(
    records: Sequence[RegionRecord],
    seed: int = 0,
    *,
    pad_frac: float = 0.1,
    nms_iou: float = 0.5,
    max_area_frac: float = 0.25,
    attempts: int = 8,
    rollout_seed: int = 0,
    generator: GeneratorPort | None = None,
    verifier: VerifierPort | None = None,
    rollout: RolloutPort | None = None,
) -> CurateResult:
    """generate -> verify -> filter -> repackage. ``seed`` only drives the MCQ shuffles."""
    images = {r.record_id: r for r in records}
    if len(images) != len(records):
        raise PipelineError("duplicate record ids")
    generator = generator or RuleGenerator()
    verifier = verifier or OracleVerifier()
    rollout = rollout or BernoulliRollout(images, rollout_seed)
    stages = StageLog()
    stages.counts["records"] = len(records)
    cands = generate(records, generator, pad_frac, nms_iou, stages)
    stages.counts["generated"] = len(cands)
    cands = verify(cands, verifier, images, stages)
    stages.counts["verified"] = len(cands)
    weighted = filter_reasoning_centric(cands, rollout, max_area_frac, attempts, stages=stages)
    stages.counts["filtered"] = len(weighted)
    tasks = []
    for wc in weighted:
        c = wc.cand
        try:
            t = repackage_mcq(c, distractor_pool(c), py_rng(seed, "mcq", c.record_id), weight=wc.weight)
        except PipelineError:
            stages.reject("repackage", "insufficient-distractors", c.record_id)
            continue
        tasks.append(replace(t, meta={**t.meta, "solve_rate": wc.solve_rate}))
    stages.counts["tasks"] = len(tasks)
    manifest = {
        "seed": seed,
        "rollout_seed": rollout_seed,
        "params": {"pad_frac": pad_frac, "nms_iou": nms_iou, "max_area_frac": max_area_frac, "attempts": attempts},
        **stages.to_json(),
    }
    return CurateResult(tasks, manifest)


def weighted_sample(tasks: Sequence[Task], n: int, rng: random.Random) -> list[Task]:
    """Draw ``n`` tasks with probability proportional to their weights."""
    if not tasks:
        raise PipelineError("cannot sample from an empty task set")
    weights = [t.weight for t in tasks]
    if sum(weights) <= 0:
        raise PipelineError("all task weights are zero")
    return rng.choices(list(tasks), weights=weights, k=n)


def synthetic_records(n: int, seed: int = 0, records_per_image: int = 4) -> list[RegionRecord]:
    """Fixture records with known ground truth: some unparseable captions, near-duplicate
    regions, oversized regions, inconsistent items and shortcut-solvable items."""
    rng = py_rng(seed, "synthetic-records")
    out: list[RegionRecord] = []
    image = None
    for i in range(n):
        if i % records_per_image == 0:
            w, h = rng.randint(200, 640), rng.randint(200, 640)
            image = (f"img{i // records_per_image:05d}", Box(0.0, 0.0, float(w), float(h)))
        image_id, bounds = image
        prev = out[-1] if out and out[-1].image_id == image_id else None
        if prev is not None and rng.random() < 0.1:
            region = prev.region
        else:
            frac = rng.choice((0.1, 0.2, 0.3, 0.45, 0.8))
            rw = max(1.0, round(bounds.width * frac * rng.uniform(0.5, 1.0)))
            rh = max(1.0, round(bounds.height * frac * rng.uniform(0.5, 1.0)))
            x = rng.uniform(0, bounds.width - rw)
            y = rng.uniform(0, bounds.height - rh)
            region = Box(round(x, 1), round(y, 1), round(x, 1) + rw, round(y, 1) + rh)
        kind = rng.choice(sorted(ATTRIBUTES))
        attr = rng.choice(ATTRIBUTES[kind])
        obj = rng.choice(OBJECTS)
        caption = f"{attr} {obj}" if rng.random() > 0.05 else f"something near the {obj}"
        truth = {
            "answer_ok": rng.random() < 0.9,
            "rationale_ok": rng.random() < 0.9,
            "shortcut_p": rng.choice((0.0, 0.1, 0.3, 0.6, 1.0)),
            "confidence": round(rng.uniform(0.5, 1.0), 3),
        }
        out.append(
            RegionRecord(
                record_id=f"rec{i:05d}",
                image_id=image_id,
                global_caption=f"A scene with a {obj}.",
                local_caption=caption,
                region=region,
                bounds=bounds,
                truth=truth,
            )
        )
    return out


def dumps_jsonl(items: Iterable[dict[str, Any]]) -> str:
    return "".join(json.dumps(obj, sort_keys=True) + "\n" for obj in items)


def read_jsonl(path: str | Path) -> list[dict[str, Any]]:
    """Parse a JSON-lines file; blank lines are skipped, bad lines raise with the line number."""
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise PipelineError(f"{path}:{n}: invalid JSON ({err.msg})") from None
            if not isinstance(obj, dict):
                raise PipelineError(f"{path}:{n}: expected a JSON object")
            rows.append(obj)
    return rows
