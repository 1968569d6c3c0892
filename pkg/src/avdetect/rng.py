"""Named, reproducible random streams.

Every stream is a Philox4x32-10 counter-based generator whose 128-bit key is
derived from a 64-bit seed and a tuple of tags (ints or strings) by chaining
SplitMix64.  String tags are first reduced to 64 bits with FNV-1a over their
UTF-8 bytes.  Distinct tag tuples give statistically independent streams, so
a sample can be regenerated from ``(seed, kind, sample_id)`` alone.
"""
from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for b in text.encode("utf-8"):
        h = ((h ^ b) * 0x100000001B3) & _MASK
    return h


def derive_key(seed: int, *tags) -> tuple[int, int]:
    state = splitmix64(seed & _MASK)
    for tag in tags:
        v = fnv1a64(tag) if isinstance(tag, str) else int(tag) & _MASK
        state = splitmix64(state ^ v)
    return state, splitmix64(state ^ 0xA5A5A5A5A5A5A5A5)


def stream(seed: int, *tags) -> np.random.Generator:
    """Generator for the stream named by ``tags`` under ``seed``."""
    k0, k1 = derive_key(seed, *tags)
    return np.random.Generator(np.random.Philox(key=np.array([k0, k1], dtype=np.uint64)))
