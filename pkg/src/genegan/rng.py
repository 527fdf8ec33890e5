"""SplitMix64 pseudo-random stream.

Every random draw in the package (dataset specs, weight init, batch
shuffles) goes through this generator so that datasets and runs can be
reproduced from a seed in any language:

    state  <- state + 0x9E3779B97F4A7C15            (mod 2**64)
    z      <- state
    z      <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9  (mod 2**64)
    z      <- (z ^ (z >> 27)) * 0x94D049BB133111EB  (mod 2**64)
    output <- z ^ (z >> 31)

A float in [0, 1) is ``(output >> 11) * 2**-53``.  An integer below ``n`` is
``floor(float * n)``.  The state is a single u64, initialised to the seed.
"""
from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK = (1 << 64) - 1


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def next_u64(self, n: int | None = None):
        """Next output, or the next ``n`` outputs as a uint64 array."""
        count = 1 if n is None else int(n)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix(z)
        self.state = (self.state + count * GAMMA) & MASK
        return int(out[0]) if n is None else out

    def random(self, n: int | None = None):
        """Uniform float64 in [0, 1)."""
        u = self.next_u64(1 if n is None else n)
        f = (u >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return float(f[0]) if n is None else f

    def uniform(self, low: float, high: float, n: int | None = None):
        u = self.random(n)
        return low + (high - low) * u

    def integers(self, high: int, n: int | None = None):
        """Integers in [0, high)."""
        u = self.random(n)
        if n is None:
            return int(u * high)
        return np.floor(u * high).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates: for i = n-1 .. 1 swap i with floor(u * (i + 1))."""
        perm = np.arange(n, dtype=np.int64)
        if n < 2:
            return perm
        u = self.random(n - 1)
        for step, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[step] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
