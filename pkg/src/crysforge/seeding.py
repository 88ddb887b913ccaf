"""Named random sub-streams derived from a single run seed."""

from __future__ import annotations

import numpy as np

STREAMS = {"datagen": 0, "init": 1, "shuffle": 2, "noise": 3}


def subseed(seed: int, stream: str, *extra: int) -> int:
    """Deterministic 32-bit seed for ``stream`` (plus optional indices)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, STREAMS[stream], *[int(e) for e in extra]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def substream(seed: int, stream: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(subseed(seed, stream, *extra))
