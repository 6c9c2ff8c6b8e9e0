"""Per-component random streams derived from one master seed.

Rule: the stream for component ``name`` is
``numpy.random.default_rng(SeedSequence(master_seed, spawn_key=(crc32(name),)))``.
Streams depend only on (master seed, name), so adding a component never
shifts the randomness of another.
"""

from __future__ import annotations

import zlib

import numpy as np


def component_rng(master_seed: int, name: str) -> np.random.Generator:
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(key,)))


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = getattr(np.random, state["bit_generator"])()
    bg.state = state
    return np.random.Generator(bg)
