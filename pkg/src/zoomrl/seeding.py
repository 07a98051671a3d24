from __future__ import annotations

import hashlib
import random

import numpy as np


def derive_seed(seed: int, *labels: object) -> int:
    """Stable 63-bit sub-seed from a root seed and a path of labels."""
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((int(seed),) + labels).encode("utf-8"))
    return int.from_bytes(h.digest(), "little") >> 1


def py_rng(seed: int, *labels: object) -> random.Random:
    return random.Random(derive_seed(seed, *labels))


def np_rng(seed: int, *labels: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *labels))
