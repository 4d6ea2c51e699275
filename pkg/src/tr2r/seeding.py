"""Deterministic per-purpose random streams.

Every random quantity is drawn from a PCG64 stream derived from a base seed
and a tuple of keys (replication index, purpose name, ...) through
``numpy.random.SeedSequence`` spawn keys, so streams are independent of each
other and of scheduling order.  Normal variates use numpy's ziggurat sampler.
"""
from __future__ import annotations

import zlib

import numpy as np

__all__ = ["derive_rng", "derive_seed"]


def _key(k) -> int:
    if isinstance(k, (int, np.integer)):
        if k < 0:
            raise ValueError("stream keys must be non-negative")
        return int(k)
    return zlib.crc32(str(k).encode("utf-8"))


def derive_seed(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(int(seed) & (2**64 - 1), spawn_key=tuple(_key(k) for k in keys))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream ``(seed, *keys)``; keys may be ints or strings."""
    return np.random.Generator(np.random.PCG64(derive_seed(seed, *keys)))
