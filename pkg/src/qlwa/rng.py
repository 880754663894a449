"""Deterministic pseudo-random number generation (SplitMix64).

All fixture and dataset generation goes through this module so that the
same seed always yields the same values, independent of numpy's global
RNG state and numpy version.

SplitMix64 constants: the state advances by 0x9E3779B97F4A7C15 per draw
and the output is finalized with the 30/27/31 xor-shift multiply mix
(multipliers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB).
"""

from __future__ import annotations

import numpy as np

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


class SplitMix64:
    """Sequential SplitMix64 stream over Python integers."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK64
        z = self._state
        z = ((z ^ (z >> 30)) * _MIX1) & _MASK64
        z = ((z ^ (z >> 27)) * _MIX2) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform draw in [0, 1) using the top 53 bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def next_below(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is negligible for small n."""
        if n <= 0:
            raise ValueError("n must be positive")
        return self.next_u64() % n


def uniform_block(seed: int, offset: int, n: int) -> np.ndarray:
    """Draws offset..offset+n-1 of SplitMix64(seed)'s float stream.

    Vectorized and exactly equal to n calls of SplitMix64.next_float()
    after skipping `offset` draws: the k-th state is seed + (k+1)*gamma,
    so any block can be computed directly.
    """
    if n < 0 or offset < 0:
        raise ValueError("offset and n must be nonnegative")
    idx = np.arange(offset + 1, offset + n + 1, dtype=np.uint64)
    state = np.uint64(seed & _MASK64) + np.uint64(_GAMMA) * idx
    z = (state ^ (state >> np.uint64(30))) * np.uint64(_MIX1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
    z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


class UniformStream:
    """Stateful consumer of a SplitMix64 float stream in array-sized chunks."""

    def __init__(self, seed: int):
        self.seed = seed
        self.offset = 0

    def take(self, n: int) -> np.ndarray:
        block = uniform_block(self.seed, self.offset, n)
        self.offset += n
        return block

    def take_signed(self, n: int) -> np.ndarray:
        """Uniform in [-1, 1)."""
        return self.take(n) * 2.0 - 1.0
