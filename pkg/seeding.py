"""Named random sub-streams derived from one top-level seed."""
import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *counters: int) -> np.random.Generator:
    """Generator for `name` (plus optional counters) under `seed`.

    Streams with different names never share state, so adding a new consumer
    does not shift the draws of existing ones.
    """
    sequence = np.random.SeedSequence(entropy=seed, spawn_key=(stream_key(name), *counters))
    return np.random.default_rng(sequence)
