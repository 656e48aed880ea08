"""Seed handling.

Every stochastic operation takes either a 64-bit integer seed or a
``numpy.random.Generator``.  Integer seeds derive independent substreams
through ``SeedSequence(seed, spawn_key=(index,))``, so the stream used for
node ``index`` depends only on (seed, index) and not on processing order.
"""

from __future__ import annotations

import numpy as np

RngLike = "int | np.random.Generator"


def as_generator(rng: int | np.random.Generator) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(np.random.SeedSequence(int(rng)))


def substreams(rng: int | np.random.Generator, count: int) -> list[np.random.Generator]:
    """Derive ``count`` independent generators from a seed or generator."""
    if count < 0:
        raise ValueError("count must be nonnegative")
    if isinstance(rng, np.random.Generator):
        return rng.spawn(count)
    seed = int(rng)
    return [
        np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        for i in range(count)
    ]


def derive_seed(seed: int, *key: int) -> int:
    """Stable 64-bit seed for a sub-task, keyed by integers."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
