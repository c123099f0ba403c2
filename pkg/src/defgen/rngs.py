"""Deterministic, addressable random streams.

Every stochastic step in the package draws from a stream keyed by
(seed, purpose tag, integer indices) rather than from one shared mutable
generator. Streams are independent of call order, which is what makes
checkpoint-resume runs bit-identical to uninterrupted ones.
"""

import zlib

import numpy as np

_MASK = (1 << 63) - 1


def stream(seed, tag: str, *indices) -> np.random.Generator:
    key = (int(seed) & _MASK, zlib.crc32(tag.encode("utf-8")), *(int(i) & _MASK for i in indices))
    return np.random.default_rng(np.random.SeedSequence(key))


def id_index(example_id) -> int:
    """Stable integer for keying a stream off an arbitrary example id."""
    return zlib.crc32(str(example_id).encode("utf-8"))
