"""Seed derivation for reproducible, order-independent random streams."""
from __future__ import annotations

import numpy as np

__all__ = ["make_rng", "trial_rng", "block_rng"]


def make_rng(seed=None) -> np.random.Generator:
    """Return a PCG64 generator; pass through an existing generator unchanged."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.Generator(np.random.PCG64(seed))


def trial_rng(master_seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Generator for a single trial, keyed on (master_seed, stream, index)."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.PCG64(ss))


def block_rng(master_seed: int, block: int, stream: int = 1) -> np.random.Generator:
    # Vectorised harness blocks use a separate stream id so that they never
    # collide with per-trial streams derived from the same master seed.
    return trial_rng(master_seed, block, stream=stream)
