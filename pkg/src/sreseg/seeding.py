"""Seed splitting.

All randomness comes from numpy's PCG64 generator.  A master seed is split
per purpose by ``SeedSequence(master, spawn_key=(purpose, *path))``, so a
component can be re-run on its own and still see the same stream.
"""
from __future__ import annotations

import numpy as np

DATA = 0
INIT = 1
SHUFFLE = 2
SAMPLING = 3
CLUSTERING = 4


def seed_sequence(master, *path) -> np.random.SeedSequence:
    key = tuple(int(p) for p in path)
    if any(p < 0 for p in key):
        raise ValueError(f"seed path entries must be non-negative, got {key}")
    return np.random.SeedSequence(int(master), spawn_key=key)


def rng_for(master, *path) -> np.random.Generator:
    """PCG64 generator for the stream ``(master, path)``."""
    return np.random.Generator(np.random.PCG64(seed_sequence(master, *path)))


def child_seed(master, *path) -> int:
    """A 63-bit integer seed for the stream ``(master, path)``."""
    return int(seed_sequence(master, *path).generate_state(1, np.uint64)[0] >> np.uint64(1))
