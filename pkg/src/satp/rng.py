"""Seedable, platform-independent pseudo-random numbers.

The generator is SplitMix64 (Steele, Lea & Flood 2014): a 64-bit counter
advanced by the golden-ratio constant, with a fixed avalanche mix applied to
each counter value.  The whole algorithm is exact integer arithmetic, so a
given seed produces the same draw sequence on every platform and numpy
version.  Gaussian draws use the Box-Muller transform on pairs of 53-bit
uniforms, which is likewise bit-reproducible.
"""

from __future__ import annotations

import numpy as np

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer on an array of uint64 counter values."""
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream with uniform, normal, shuffle and child-stream draws."""

    def __init__(self, seed: int):
        self._seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._counter = 0

    @property
    def seed(self) -> int:
        return self._seed

    def _next_block(self, n: int) -> np.ndarray:
        """Next n raw uint64 values."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            states = np.uint64(self._seed) + idx * np.uint64(_GOLDEN)
            return _mix(states)

    def next_u64(self) -> int:
        return int(self._next_block(1)[0])

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray | float:
        """Uniform draws in [low, high) with 53-bit resolution."""
        n = 1 if size is None else int(np.prod(size))
        u = (self._next_block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None) -> np.ndarray | float:
        """Gaussian draws via Box-Muller; consumes two uniforms per pair."""
        n = 1 if size is None else int(np.prod(size))
        pairs = (n + 1) // 2
        u1 = 1.0 - np.asarray(self.uniform(size=(pairs,)))  # (0, 1], keeps log finite
        u2 = np.asarray(self.uniform(size=(pairs,)))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        out = mean + std * z
        if size is None:
            return float(out[0])
        return out.reshape(size)

    def randint(self, n: int) -> int:
        """Integer in [0, n). Modulo bias is below 2**-50 for any n we use."""
        if n <= 0:
            raise ValueError("randint requires n >= 1")
        return self.next_u64() % n

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def permutation(self, n: int) -> list[int]:
        order = list(range(n))
        self.shuffle(order)
        return order

    def choice(self, weights: np.ndarray) -> int:
        """Index drawn proportionally to non-negative weights."""
        w = np.asarray(weights, dtype=np.float64)
        total = float(w.sum())
        if total <= 0:
            raise ValueError("choice requires positive total weight")
        u = self.uniform(0.0, total)
        return int(np.searchsorted(np.cumsum(w), u, side="right").clip(0, len(w) - 1))

    def spawn(self, index: int) -> "Rng":
        """Independent child stream; deterministic in (seed, index)."""
        with np.errstate(over="ignore"):
            child = _mix(np.uint64(self._seed) + np.uint64(index + 1) * np.uint64(_GOLDEN) * np.uint64(0x9FB21C651E98DF25 & 0xFFFFFFFFFFFFFFFF))
        return Rng(int(child))
