"""Named random sub-streams derived from one root seed.

Every consumer of randomness asks for a stream by name (plus optional integer
keys), so toggling one component never shifts the draws seen by another.
"""

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def rng_stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, stream_key(name), *(int(k) for k in keys)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def torch_seed(seed: int, name: str, *keys: int) -> int:
    """A 63-bit integer seed for torch generators, drawn from a named stream."""
    return int(rng_stream(seed, name, *keys).integers(0, 2**63 - 1))
