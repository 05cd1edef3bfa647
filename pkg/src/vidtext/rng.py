"""Deterministic pseudo-random numbers from a fully specified algorithm.

The generator is SplitMix64: state ``k`` (the number of 64-bit words drawn
so far) maps to output ``mix64(seed + (k+1) * GAMMA) mod 2**64``.  Because
the state is an affine function of the position, streams can be repositioned
in O(1), which makes checkpoint resume exact.  All constants are written out
so another implementation can reproduce the same draw sequence bit for bit.

Derived quantities are defined on top of the raw 64-bit stream:

* ``uniform``: top 53 bits scaled by 2**-53, in [0, 1).
* ``normal``: Box-Muller, ``sqrt(-2 ln(1-u1)) * cos(2 pi u2)``, consuming
  exactly two words per sample (the sine branch is discarded).
* ``trunc_normal``: redraw ``normal`` until |z| <= 2, then scale by ``std``.
* ``randint(n)``: ``min(floor(uniform() * n), n - 1)``.
* ``shuffle``: Fisher-Yates from the top index down.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
MIX_MUL_1 = 0xBF58476D1CE4E5B9
MIX_MUL_2 = 0x94D049BB133111EB

_TWO_PI = 2.0 * math.pi
_INV_2_53 = 2.0 ** -53


def mix64(z: int) -> int:
    """SplitMix64 finalizer on a 64-bit word."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * MIX_MUL_1) & MASK64
    z = ((z ^ (z >> 27)) * MIX_MUL_2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    # uint64 arithmetic wraps, matching the scalar masks.
    z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_MUL_1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_MUL_2)
    return z ^ (z >> np.uint64(31))


class Rng:
    """Seeded stream with an explicit, checkpointable position."""

    def __init__(self, seed: int, position: int = 0):
        self._seed = seed & MASK64
        self._pos = int(position)

    @property
    def seed(self) -> int:
        return self._seed

    @property
    def position(self) -> int:
        """Number of 64-bit words consumed so far."""
        return self._pos

    def set_position(self, position: int) -> None:
        self._pos = int(position)

    def derive(self, key: int) -> "Rng":
        """Independent child stream; used for per-epoch batch orders."""
        return Rng(mix64(self._seed ^ (((key + 1) * GAMMA) & MASK64)))

    def next_u64(self) -> int:
        self._pos += 1
        return mix64((self._seed + self._pos * GAMMA) & MASK64)

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * _INV_2_53

    def normal(self) -> float:
        u1 = self.uniform()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log1p(-u1)) * math.cos(_TWO_PI * u2)

    def trunc_normal(self, std: float = 1.0) -> float:
        while True:
            z = self.normal()
            if abs(z) <= 2.0:
                return z * std

    def randint(self, n: int) -> int:
        if n < 1:
            raise ValueError(f"randint needs n >= 1, got {n}")
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def sample(self, items: list, k: int) -> list:
        """k items without replacement (shuffled copy, first k)."""
        if k > len(items):
            raise ValueError(f"cannot sample {k} from {len(items)} items")
        pool = list(items)
        self.shuffle(pool)
        return pool[:k]

    # Array draws are defined to consume the stream exactly as the scalar
    # calls would, so scalar and vectorized code interleave freely.

    def uniform_array(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        ks = np.arange(self._pos + 1, self._pos + n + 1, dtype=np.uint64)
        self._pos += n
        words = _mix64_array(np.uint64(self._seed) + ks * np.uint64(GAMMA))
        u = (words >> np.uint64(11)).astype(np.float64) * _INV_2_53
        return (low + u * (high - low)).reshape(shape)

    def normal_array(self, shape) -> np.ndarray:
        n = int(np.prod(shape)) if shape else 1
        u = self.uniform_array((2 * n,))
        z = np.sqrt(-2.0 * np.log1p(-u[0::2])) * np.cos(_TWO_PI * u[1::2])
        return z.reshape(shape)

    def trunc_normal_array(self, shape, std: float = 0.02) -> np.ndarray:
        # Sequential scalar semantics: element i finishes all its redraws
        # before element i+1 starts.
        n = int(np.prod(shape)) if shape else 1
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            out[i] = self.trunc_normal(std)
        return out.reshape(shape)
