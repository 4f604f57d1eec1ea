"""Named, independent RNG streams derived from one root seed.

Each stream is ``SeedSequence(root, spawn_key=(stream_id, index))``, so adding
draws to one stream (e.g. more optimizer epochs) never shifts another (e.g.
environment randomness).
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "env": 1,
    "policy": 2,
    "shuffle": 3,
    "capacity": 4,
    "normalizer": 5,
}


def seed_sequence(root: int, name: str, index: int = 0) -> np.random.SeedSequence:
    if name not in STREAMS:
        raise KeyError(f"unknown RNG stream {name!r}")
    return np.random.SeedSequence(int(root), spawn_key=(STREAMS[name], int(index)))


def stream_rng(root: int, name: str, index: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_sequence(root, name, index)))


def stream_seed(root: int, name: str, index: int = 0) -> int:
    """A 32-bit integer seed for consumers that take plain ints."""
    return int(seed_sequence(root, name, index).generate_state(1)[0])
