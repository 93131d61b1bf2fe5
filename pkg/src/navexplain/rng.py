"""Named random streams derived from one global seed.

Each stream is a counter-based Philox generator keyed by the global seed, a
stable hash of the stream name and optional integer indices (episode, trial),
so streams never depend on how many numbers other streams consumed.
"""

import zlib

import numpy as np


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    key = (zlib.crc32(name.encode()),) + tuple(int(i) for i in index)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=key)))


def substream_seed(seed: int, name: str, *index: int) -> int:
    """A 63-bit integer seed drawn from a named stream."""
    return int(stream(seed, name, *index).integers(0, 2**63 - 1))
