"""Deterministic RNG streams.

Every stochastic operation draws from a generator derived from a tuple of
integers (global seed, round, client id, purpose tag, ...). Streams are
therefore independent of scheduling and identical across repeat runs.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

# Purpose tags keep unrelated streams from colliding even when the other
# tuple components coincide.
TAG_MODEL_INIT = 1
TAG_MASKS = 2
TAG_SBM = 3
TAG_PARTITION = 4
TAG_OVERLAP = 5
TAG_DISTILL_INIT = 6
TAG_DISTILL_STEPS = 7
TAG_DISTILL_FINAL = 8


def derive_rng(*parts: int | Iterable[int]) -> np.random.Generator:
    """Build a generator from a flat tuple of non-negative integers."""
    flat: list[int] = []
    for part in parts:
        if isinstance(part, (int, np.integer)):
            flat.append(int(part))
        else:
            flat.extend(int(p) for p in part)
    if any(p < 0 for p in flat):
        raise ValueError("seed components must be non-negative")
    return np.random.default_rng(np.random.SeedSequence(flat))
