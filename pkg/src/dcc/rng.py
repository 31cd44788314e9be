"""Named random sub-streams derived from one seed.

Each consumer draws from its own generator, keyed by name, so adding draws
to one stream never shifts another.
"""

import zlib

import numpy as np

STREAMS = ("model_init", "batch", "augment", "synthetic_init", "eval", "select")


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    key = (zlib.crc32(name.encode()),) + tuple(int(e) for e in extra)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def substream_seed(seed: int, name: str, *extra: int) -> int:
    """A deterministic 31-bit integer seed for APIs that want an int."""
    return int(stream(seed, name, *extra).integers(0, 2**31 - 1))
