"""Named RNG sub-streams derived from one run seed.

Each consumer (init, data, schedule, eval) gets an independent generator so
changing how one consumes randomness never perturbs the others.
"""

from __future__ import annotations

import numpy as np

# fixed spawn keys: the mapping must never change or runs stop reproducing
_STREAM_KEYS = {"init": 0, "data": 1, "schedule": 2, "eval": 3, "analysis": 4}


def stream(seed: int, name: str) -> np.random.Generator:
    """Generator for the named sub-stream of ``seed``."""
    if name not in _STREAM_KEYS:
        raise KeyError(f"unknown rng stream {name!r}; known: {sorted(_STREAM_KEYS)}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_STREAM_KEYS[name],))
    return np.random.default_rng(ss)


def streams(seed: int) -> dict[str, np.random.Generator]:
    """All named sub-streams for ``seed``."""
    return {name: stream(seed, name) for name in _STREAM_KEYS}
