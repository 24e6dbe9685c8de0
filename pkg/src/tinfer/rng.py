"""Deterministic, platform-independent random streams (splitmix64).

Weight init and dataset generation must produce bit-identical output for a
given seed on any machine, so we avoid numpy's Generator (implementation
may change between releases) and use splitmix64: output n is a pure
function of ``seed + n * GAMMA``, which also lets us generate whole
tensors vectorized.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    """Counter-based splitmix64 stream."""

    def __init__(self, seed: int):
        self._seed = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
        self._count = 0

    def next_u64(self) -> int:
        out = self.u64(1)[0]
        return int(out)

    def u64(self, n: int) -> np.ndarray:
        """Next n raw 64-bit values."""
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        with np.errstate(over="ignore"):
            state = (self._seed + idx * _GAMMA) & _MASK
            return _mix(state)

    def uniform(self, n: int, low: float, high: float) -> np.ndarray:
        """Next n float64 values uniform in [low, high)."""
        bits = self.u64(n)
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return low + u * (high - low)

    def randint(self, n: int, bound: int) -> np.ndarray:
        """Next n integers in [0, bound). Modulo bias is acceptable here:
        bound is always tiny relative to 2**64."""
        return (self.u64(n) % np.uint64(bound)).astype(np.int64)


def derive_seed(seed: int, label: str) -> int:
    """Stable sub-stream seed from a parent seed and a short label."""
    h = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        for ch in label.encode("utf-8"):
            h = _mix((h ^ np.uint64(ch)) * _GAMMA)
    return int(h)
