"""Deterministic random streams.

All randomness in the package flows through Philox 4x64, a counter-based
generator keyed explicitly per (seed, purpose tags). There is no global RNG
state; identical (seed, tags) always yields an identical stream, on any
platform, regardless of call order elsewhere.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def fold_tags(*tags: int) -> int:
    """Mix integer tags into a single 64-bit word (splitmix64 finalizer)."""
    h = 0
    for t in tags:
        h = (h + (int(t) & _MASK64) + _GOLDEN) & _MASK64
        z = h
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        h = z ^ (z >> 31)
    return h


def rng_for(seed: int, *tags: int) -> np.random.Generator:
    """Generator keyed by (seed, folded tags); independent across tag tuples."""
    key = np.array([int(seed) & _MASK64, fold_tags(*tags)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
