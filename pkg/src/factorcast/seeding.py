"""Deterministic 64-bit hashing for seed derivation and prior sampling."""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_SCALE = 1.0 / float(2**64)


def splitmix64(x) -> np.ndarray:
    """SplitMix64 finalizer; accepts scalars or uint64 arrays."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z + _GOLDEN).astype(np.uint64)
        z = ((z ^ (z >> np.uint64(30))) * _MIX1).astype(np.uint64)
        z = ((z ^ (z >> np.uint64(27))) * _MIX2).astype(np.uint64)
        z = z ^ (z >> np.uint64(31))
    return z


def hash_to_unit(x) -> np.ndarray:
    """Map hashed integers uniformly into [0, 1)."""
    return splitmix64(x).astype(np.float64) * _U64_SCALE


def derive_seed(root_seed: int, *labels) -> int:
    """Split one root seed into independent per-purpose streams.

    Labels may be ints or short strings; the derivation is stable across
    runs and platforms.
    """
    h = np.uint64(root_seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for label in labels:
            if isinstance(label, str):
                for ch in label:
                    h = splitmix64(h ^ np.uint64(ord(ch)))
            else:
                h = splitmix64(h ^ np.uint64(int(label) & 0xFFFFFFFFFFFFFFFF))
    return int(h)
