"""Deterministic fan-out of one experiment seed into named rng streams.

Every randomized component (data generation, epoch sampling, masking,
parameter init, dropout, ...) draws from its own stream so reseeding one
component in a test cannot shift another. Stream identity is the CRC32 of
the stream name, which is stable across runs and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 generator for (seed, stream name)."""
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, key])))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's state."""
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
