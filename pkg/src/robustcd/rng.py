"""Seed derivation for reproducible, schedule-independent random streams.

Every stochastic component derives its generator from a master seed plus a
path of labels (scenario id, replicate index, "pilot", ...).  Streams with
different paths are statistically independent, and results do not depend on
the order in which workers consume them.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _entropy_item(item) -> int:
    if isinstance(item, (int, np.integer)):
        return int(item) & _MASK64
    if isinstance(item, str):
        digest = hashlib.sha256(item.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    if isinstance(item, float):
        return _entropy_item(repr(item))
    raise TypeError(f"cannot derive entropy from {type(item).__name__}")


def seed_sequence(seed: int, *path) -> np.random.SeedSequence:
    entropy = [_entropy_item(seed)] + [_entropy_item(p) for p in path]
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by (seed, *path)."""
    return np.random.Generator(np.random.PCG64(seed_sequence(seed, *path)))
