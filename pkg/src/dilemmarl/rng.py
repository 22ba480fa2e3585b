"""Counter-based random streams.

Every episode owns two kinds of stream: one keyed by its environment seed
(item values, hands) and one per seat keyed by that seat's action seed.
A draw is a pure function of ``(seed, tag, counter)``, so streams can be
evaluated for a whole batch of episodes at once and never interfere with
each other regardless of how many draws a policy makes.
"""

from __future__ import annotations

import numpy as np

ENV_TAG = 0x1
ACTION_TAG = 0x2
SCRIPT_TAG = 0x3

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix(x: np.ndarray) -> np.ndarray:
    z = x + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def as_seeds(seeds) -> np.ndarray:
    """Coerce python ints or arrays to a 1-d ``uint64`` seed array."""
    arr = np.asarray(seeds)
    if arr.dtype != np.uint64:
        arr = np.array([int(s) & 0xFFFFFFFFFFFFFFFF for s in np.ravel(arr)], dtype=np.uint64)
    return np.atleast_1d(arr)


def uniforms(seeds, tag: int, counter: int) -> np.ndarray:
    """One float in [0, 1) per seed, for draw number ``counter`` of stream ``tag``."""
    seeds = as_seeds(seeds)
    key = np.uint64(((tag & 0xFFFF) << 48) | (counter & 0xFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        h = _splitmix(seeds ^ _splitmix(np.full(seeds.shape, key, dtype=np.uint64)))
        h = _splitmix(h)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


class SeedStream:
    """Scalar view of a counter-based stream; ``draw(c)`` is the c-th uniform."""

    def __init__(self, seed: int, tag: int = ENV_TAG):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.tag = tag

    def draw(self, counter: int) -> float:
        return float(uniforms([self.seed], self.tag, counter)[0])

    def __repr__(self):
        return f"SeedStream(seed={self.seed:#x}, tag={self.tag})"
