"""Deterministic RNG substreams keyed by (root seed, purpose, indices...)."""

from __future__ import annotations

import numpy as np

INIT = 1
SHUFFLE = 2
TRAIN = 3
EVAL = 4
ATTACK = 5
REFINE = 6

# sub-keys within one Monte-Carlo draw
STRUCTURE = 0
DROPOUT = 1
WEIGHTS = 2


def substream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *(int(k) for k in key)])
