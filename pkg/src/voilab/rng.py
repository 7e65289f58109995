"""Named random substreams derived from one master seed.

Every stochastic stage draws from its own generator so that changing one
knob (say, the influence strength) reruns with the other streams intact.
Stream identity is (master seed, stream name), nothing else.
"""

from __future__ import annotations

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for `name` under the master `seed`.

    The name is hashed into a spawn key, so distinct names give streams that
    are independent by construction and stable across runs and platforms.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(key,)))


def child_seed(seed: int, name: str) -> int:
    """Derive a 63-bit integer seed for a stage that wants its own master."""
    key = zlib.crc32(name.encode("utf-8"))
    state = np.random.SeedSequence(seed, spawn_key=(key,)).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
