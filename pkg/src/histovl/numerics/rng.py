"""Counter-based SplitMix64 generator.

Every stochastic operation in the package draws from :class:`SeededRng`.
The stream is a pure function of ``(seed, counter)`` so it is identical on
every platform and can be produced in vectorised blocks with numpy uint64
arithmetic (which wraps modulo 2**64).

Output ``i`` of a generator with seed ``s`` is ``mix64(s + (i + 1) * GAMMA)``
where ``mix64`` is the SplitMix64 finaliser.
"""
from __future__ import annotations

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


class SeededRng:
    """Deterministic generator; single owner, never share across workers.

    Use :meth:`child` to derive independent streams for parallel work.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK
        self.counter = 0

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, counter={self.counter})"

    def child(self, key: int) -> "SeededRng":
        """Independent generator keyed by ``key``; does not advance ``self``."""
        base = np.array([self.seed ^ ((int(key) * 0xD1B54A32D192ED03) & _MASK)], dtype=np.uint64)
        return SeededRng(int(mix64(mix64(base) + GAMMA)[0]))

    def random_raw(self, n: int) -> np.ndarray:
        n = int(n)
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        return mix64(np.uint64(self.seed) + idx * GAMMA)

    def random(self, size=None) -> np.ndarray | float:
        """Uniform doubles in [0, 1) with 53 bits of randomness."""
        n = 1 if size is None else int(np.prod(size))
        u = (self.random_raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        if size is None:
            return float(u[0])
        return u.reshape(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return low + (high - low) * self.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        """Box-Muller; consumes two raw draws per variate."""
        n = 1 if size is None else int(np.prod(size))
        u = self.random(2 * n).reshape(2, n)
        z = np.sqrt(-2.0 * np.log1p(-u[0])) * np.cos(2.0 * np.pi * u[1])
        z = loc + scale * z
        if size is None:
            return float(z[0])
        return z.reshape(size)

    def integers(self, low: int, high: int | None = None, size=None):
        """Integers in [low, high) by floor(u * span); bias < span / 2**53."""
        if high is None:
            low, high = 0, low
        span = int(high) - int(low)
        if span <= 0:
            raise ValueError("empty integer range")
        n = 1 if size is None else int(np.prod(size))
        v = np.floor(self.random(n) * span).astype(np.int64) + int(low)
        if size is None:
            return int(v[0])
        return v.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        js = self.random(n - 1)
        for i in range(n - 1, 0, -1):
            j = int(js[n - 1 - i] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def choice(self, n: int, size: int, replace: bool = True, p=None) -> np.ndarray:
        if p is not None:
            cdf = np.cumsum(np.asarray(p, dtype=np.float64))
            cdf /= cdf[-1]
            idx = np.searchsorted(cdf, self.random(size), side="right")
            return np.minimum(idx, n - 1)
        if replace:
            return self.integers(0, n, size=size)
        if size > n:
            raise ValueError("cannot draw more items than available without replacement")
        return self.permutation(n)[:size]

    def bytes(self, n: int) -> bytes:
        words = self.random_raw((n + 7) // 8)
        return words.astype("<u8").tobytes()[:n]
