"""Deterministic per-component seeds from one global seed.

``derive(seed, name)`` mixes the global seed with a CRC32 of the component
name through the SplitMix64 finalizer, so every component (model init,
minibatch order, sampling noise, attack subset, ...) gets an independent
stream that does not shift when another component is added or removed.
"""

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def derive(seed: int, name: str) -> int:
    return splitmix64((int(seed) & _MASK) ^ (zlib.crc32(name.encode("utf-8")) << 32))


def rng_for(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(derive(seed, name))
