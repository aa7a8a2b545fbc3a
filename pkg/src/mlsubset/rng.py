"""Seed derivation and counter-based hashing."""
from __future__ import annotations

import numpy as np

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def splitmix64(x: np.ndarray) -> np.ndarray:
    """Vectorised SplitMix64 finaliser on uint64 arrays."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def hash_rows(theta: np.ndarray, *keys: int) -> np.ndarray:
    """Deterministic 64-bit hash of each row of a float64 array mixed with integer keys."""
    theta = np.ascontiguousarray(theta, dtype=np.float64)
    bits = theta.view(np.uint64)
    h = np.full(theta.shape[0], 0x243F6A8885A308D3, dtype=np.uint64)
    for k in keys:
        h = splitmix64(h ^ np.uint64(int(k) & 0xFFFFFFFFFFFFFFFF))
    for c in range(bits.shape[1]):
        h = splitmix64(h ^ bits[:, c])
    return h


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of nonnegative integers (numpy ``SeedSequence``)."""
    ss = np.random.SeedSequence([int(k) for k in keys])
    return int(ss.generate_state(2, dtype=np.uint32).astype(np.uint64) @ np.array([1, 1 << 32], dtype=np.uint64)) >> 1


def generator(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))
