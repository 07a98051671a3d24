"""Toy parametric policy over a fixed set of multi-scale anchor boxes.

Each turn the policy first decides whether to stop (Bernoulli on a per-turn logit);
if it continues it picks an anchor from a softmax conditioned on the question cue.
On stopping it answers from a two-feature linear head: agreement with the coarse hint
and the share of observed choice glyphs.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field

import numpy as np

from ..geom import Box


def make_anchors(grid_w: int, grid_h: int, sizes: tuple[int, ...] = (2, 4, 8), stride: int = 2) -> list[Box]:
    anchors: list[Box] = []
    seen = set()
    for s in sizes:
        sw, sh = min(s, grid_w), min(s, grid_h)
        for y in range(0, grid_h - sh + 1, stride):
            for x in range(0, grid_w - sw + 1, stride):
                key = (x, y, x + sw, y + sh)
                if key not in seen:
                    seen.add(key)
                    anchors.append(Box(float(x), float(y), float(x + sw), float(y + sh)))
    return anchors


@dataclass
class PolicyParams:
    anchor_logits: np.ndarray  # (n_cues, n_anchors)
    stop_logits: np.ndarray  # (max_rounds,); turn max_rounds always stops
    answer_w: np.ndarray  # (2,): weight on hint agreement, weight on observed share

    @classmethod
    def init(
        cls,
        n_cues: int,
        n_anchors: int,
        max_rounds: int,
        stop_logit: float = 0.0,
        w_hint: float = 1.0,
        w_obs: float = 2.0,
    ) -> "PolicyParams":
        return cls(
            anchor_logits=np.zeros((n_cues, n_anchors)),
            stop_logits=np.full(max_rounds, float(stop_logit)),
            answer_w=np.array([w_hint, w_obs], dtype=float),
        )

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.anchor_logits.copy(), self.stop_logits.copy(), self.answer_w.copy())

    def zeros_like(self) -> "PolicyParams":
        return PolicyParams(
            np.zeros_like(self.anchor_logits), np.zeros_like(self.stop_logits), np.zeros_like(self.answer_w)
        )

    def arrays(self) -> tuple[np.ndarray, ...]:
        return (self.anchor_logits, self.stop_logits, self.answer_w)

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays())

    def equals(self, other: "PolicyParams") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))

    def to_json(self) -> dict:
        return {
            "anchor_logits": self.anchor_logits.tolist(),
            "stop_logits": self.stop_logits.tolist(),
            "answer_w": self.answer_w.tolist(),
        }


def _softmax(z: list[float]) -> list[float]:
    m = max(z)
    e = [math.exp(v - m) for v in z]
    s = sum(e)
    return [v / s for v in e]


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _categorical(rng: random.Random, probs: list[float]) -> int:
    r = rng.random()
    acc = 0.0
    for i, p in enumerate(probs):
        acc += p
        if r < acc:
            return i
    return len(probs) - 1


# Decision kinds; each sampled decision is one "token" of the trajectory.
STOP, CONTINUE, ANCHOR, ANSWER = "stop", "continue", "anchor", "answer"


@dataclass(frozen=True)
class Decision:
    kind: str
    turn: int = 0
    cue: int = 0
    choice: int = 0
    features: tuple[tuple[float, float], ...] = ()


def answer_features(choices: tuple[int, ...], hint: int, seen: dict) -> tuple[tuple[float, float], ...]:
    """(hint agreement, share of observed choice glyphs) for each choice.

    Once any choice glyph has been observed the hint feature is switched off: the
    answer is then read from the zoomed evidence, right or wrong.
    """
    counts = [0] * len(choices)
    index = {g: i for i, g in enumerate(choices)}
    for g in seen.values():
        i = index.get(g)
        if i is not None:
            counts[i] += 1
    total = sum(counts)
    if total:
        return tuple((0.0, c / total) for c in counts)
    return tuple((1.0 if g == hint else 0.0, 0.0) for g in choices)


@dataclass
class Sampler:
    """Per-iteration snapshot of policy probabilities for fast episode sampling."""

    params: PolicyParams
    temperature: float = 1.0
    anchor_probs: list[list[float]] = field(init=False)
    stop_probs: list[float] = field(init=False)

    def __post_init__(self) -> None:
        t = self.temperature
        if t > 0:
            self.anchor_probs = [_softmax([v / t for v in row]) for row in self.params.anchor_logits.tolist()]
            self.stop_probs = [_sigmoid(v / t) for v in self.params.stop_logits.tolist()]
        else:
            self.anchor_probs = [_argmax_onehot(row) for row in self.params.anchor_logits.tolist()]
            self.stop_probs = [1.0 if v > 0 else 0.0 for v in self.params.stop_logits.tolist()]
        self._w = self.params.answer_w.tolist()
        self._answer_cache: dict[tuple, list[float]] = {}

    def answer_probs(self, features: tuple[tuple[float, float], ...]) -> list[float]:
        p = self._answer_cache.get(features)
        if p is None:
            wh, wo = self._w
            z = [wh * h + wo * o for h, o in features]
            if self.temperature > 0:
                p = _softmax([v / self.temperature for v in z])
            else:
                p = _argmax_onehot(z)
            self._answer_cache[features] = p
        return p

    def stop(self, rng: random.Random, turn: int) -> bool:
        if turn >= len(self.stop_probs):
            return True
        return rng.random() < self.stop_probs[turn]

    def anchor(self, rng: random.Random, cue: int) -> int:
        return _categorical(rng, self.anchor_probs[cue])

    def answer(self, rng: random.Random, features: tuple[tuple[float, float], ...]) -> int:
        return _categorical(rng, self.answer_probs(features))


def _argmax_onehot(z: list[float]) -> list[float]:
    best = max(range(len(z)), key=lambda i: (z[i], -i))
    return [1.0 if i == best else 0.0 for i in range(len(z))]


class PolicyTables:
    """Probabilities under fixed parameters, for evaluating many decisions at once."""

    def __init__(self, params: PolicyParams):
        z = params.anchor_logits - params.anchor_logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        self.anchor_probs = p / p.sum(axis=1, keepdims=True)
        self.stop_probs = [_sigmoid(v) for v in params.stop_logits.tolist()]
        self.answer_w = params.answer_w.tolist()

    def answer_probs(self, features: tuple[tuple[float, float], ...]) -> list[float]:
        wh, wo = self.answer_w
        return _softmax([wh * h + wo * o for h, o in features])

    def log_prob(self, d: Decision) -> float:
        if d.kind == STOP:
            return math.log(max(self.stop_probs[d.turn], 1e-300))
        if d.kind == CONTINUE:
            return math.log(max(1.0 - self.stop_probs[d.turn], 1e-300))
        if d.kind == ANCHOR:
            return math.log(max(float(self.anchor_probs[d.cue, d.choice]), 1e-300))
        return math.log(max(self.answer_probs(d.features)[d.choice], 1e-300))

    def accumulate_grad(self, weighted: list[tuple[Decision, float]], grad: PolicyParams) -> None:
        """Add ``sum_i w_i * d(log p(d_i))/d(params)`` into ``grad``."""
        n_cues, n_anchors = self.anchor_probs.shape
        picks = np.zeros((n_cues, n_anchors))
        totals = np.zeros(n_cues)
        for d, w in weighted:
            if d.kind == STOP:
                grad.stop_logits[d.turn] += w * (1.0 - self.stop_probs[d.turn])
            elif d.kind == CONTINUE:
                grad.stop_logits[d.turn] -= w * self.stop_probs[d.turn]
            elif d.kind == ANCHOR:
                picks[d.cue, d.choice] += w
                totals[d.cue] += w
            else:
                p = self.answer_probs(d.features)
                mh = sum(pi * f[0] for pi, f in zip(p, d.features))
                mo = sum(pi * f[1] for pi, f in zip(p, d.features))
                fh, fo = d.features[d.choice]
                grad.answer_w[0] += w * (fh - mh)
                grad.answer_w[1] += w * (fo - mo)
        grad.anchor_logits += picks - totals[:, None] * self.anchor_probs


def log_prob_and_grad(params: PolicyParams, d: Decision, grad: PolicyParams | None, scale: float) -> float:
    """Log-probability of one decision; adds ``scale * d(log p)/d(params)`` into ``grad``."""
    tables = PolicyTables(params)
    if grad is not None:
        tables.accumulate_grad([(d, scale)], grad)
    return tables.log_prob(d)
