"""Deterministic counter-based random numbers.

Every draw is a pure function of (seed, counter), so streams are
reproducible across platforms, numpy versions, and thread counts.  The
generator is SplitMix64: output i is the finalizer of
``seed + (i + 1) * 0x9E3779B97F4A7C15`` where the finalizer xor-shifts and
multiplies by the fixed constants below.  Uniforms take the top 53 bits,
gaussians use the Box-Muller transform, and subset sampling uses Floyd's
algorithm.  None of this is cryptographic; it is for reproducible
experiments only.
"""

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = float(2.0**-53)


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class CounterRng:
    """SplitMix64 stream addressed by an advancing 64-bit counter."""

    def __init__(self, seed):
        if not isinstance(seed, (int, np.integer)) or isinstance(seed, bool):
            raise TypeError("seed must be an integer")
        self._seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def raw(self, count):
        """Next ``count`` raw 64-bit words as a uint64 array."""
        idx = np.arange(self._counter + 1, self._counter + count + 1, dtype=np.uint64)
        self._counter += count
        with np.errstate(over="ignore"):
            return _mix(self._seed + idx * _GAMMA)

    def uniform(self, count):
        """Doubles in [0, 1), 53-bit resolution."""
        return (self.raw(count) >> np.uint64(11)).astype(np.float64) * _U53

    def standard_normal(self, shape):
        """Gaussian array via Box-Muller on consecutive uniform pairs."""
        total = int(np.prod(shape)) if np.ndim(shape) else int(shape)
        pairs = (total + 1) // 2
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = (self.raw(pairs) >> np.uint64(11)).astype(np.float64)
        u1 = (u1 + 1.0) * _U53
        u2 = self.uniform(pairs)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:total].reshape(shape)

    def below(self, bound):
        """One integer uniform on [0, bound), rejection-sampled (no modulo bias)."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        bound = int(bound)
        limit = (2**64 // bound) * bound
        while True:
            word = int(self.raw(1)[0])
            if word < limit:
                return word % bound

    def permutation(self, count):
        """Permutation of range(count) by stable argsort of one uniform draw per slot."""
        return np.argsort(self.uniform(count), kind="stable")

    def sample_without_replacement(self, population, count):
        """Floyd's algorithm: ``count`` distinct ints from [0, population), sorted."""
        if count < 0 or count > population:
            raise ValueError("need 0 <= count <= population")
        chosen = set()
        for j in range(population - count, population):
            t = self.below(j + 1)
            chosen.add(t if t not in chosen else j)
        return np.array(sorted(chosen), dtype=np.int64)
