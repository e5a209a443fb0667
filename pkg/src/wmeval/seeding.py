"""Deterministic RNG derivation from structured keys.

Every source of randomness in the project derives its generator from a tuple
of keys (ints or strings) hashed through SHA-256, never from a shared global
generator. This makes episodes, noise draws, and judge flips reproducible and
independent of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def seed_words(*keys: int | str) -> list[int]:
    """Hash a key tuple into four 32-bit words suitable for SeedSequence."""
    h = hashlib.sha256()
    for k in keys:
        if isinstance(k, bool) or not isinstance(k, (int, str)):
            raise TypeError(f"seed keys must be int or str, got {type(k).__name__}")
        h.update(repr(k).encode())
        h.update(b"\x1f")
    digest = h.digest()
    return [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]


def rng_from(*keys: int | str) -> np.random.Generator:
    """Return a PCG64 generator keyed deterministically by ``keys``."""
    return np.random.default_rng(np.random.SeedSequence(seed_words(*keys)))
