"""Seedable, platform-independent random streams built on splitmix64.

splitmix64 is counter based: the i-th output only depends on
``seed + i * GAMMA``, so whole blocks of draws are generated with vectorized
uint64 arithmetic and the stream is identical whatever the block sizes.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class Rng:
    """splitmix64 generator.

    >>> Rng(0).next_u64()
    16294208416658607535
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.state = self.seed

    def _block(self, n: int) -> np.ndarray:
        if n == 0:
            return np.zeros(0, dtype=np.uint64)
        with np.errstate(over="ignore"):
            counters = np.arange(1, n + 1, dtype=np.uint64) * _GAMMA + np.uint64(self.state)
            out = _mix(counters)
        self.state = (self.state + n * int(_GAMMA)) & _MASK64
        return out

    def next_u64(self) -> int:
        return int(self._block(1)[0])

    def u64(self, n: int) -> np.ndarray:
        return self._block(n)

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Doubles in [low, high) using the top 53 bits of each draw."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self._block(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape=(), mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller transform over pairs of uniforms."""
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        u = self.uniform((pairs, 2))
        radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        z = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1).reshape(-1)[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Integers in [low, high) by modulo reduction (bias < 2**-40 for spans < 2**24)."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        shape = _as_shape(shape)
        n = int(np.prod(shape, dtype=np.int64))
        span = np.uint64(high - low)
        return (self._block(n) % span).astype(np.int64).reshape(shape) + low

    def permutation(self, n: int) -> np.ndarray:
        """Uniform random permutation (Fisher-Yates over a pre-drawn block)."""
        perm = np.arange(n)
        if n < 2:
            return perm
        draws = self._block(n - 1)
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(draws[k] % np.uint64(i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def spawn(self) -> "Rng":
        """Independent child stream seeded from this one."""
        return Rng(self.next_u64())


def _as_shape(shape) -> tuple[int, ...]:
    if isinstance(shape, (int, np.integer)):
        return (int(shape),)
    return tuple(int(s) for s in shape)
