"""Splitmix64-based deterministic random streams.

All workload randomness flows through SplitMix64 so that traces are
bit-identical across platforms and Python versions.  The generator is the
standard splitmix64 finalizer; floating-point draws take the top 53 bits.
"""

from __future__ import annotations

import math

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def mix(*values: int) -> int:
    """Fold several integers into one 64-bit seed."""
    acc = 0
    for v in values:
        acc, out = splitmix64((acc ^ (v & MASK64)) & MASK64)
        acc = out
    return acc


class SplitMix64:
    """Deterministic random stream seeded from a 64-bit value."""

    def __init__(self, seed: int):
        self._state = seed & MASK64

    def next_u64(self) -> int:
        self._state, out = splitmix64(self._state)
        return out

    def random(self) -> float:
        """Uniform float in [0, 1)."""
        return (self.next_u64() >> 11) * (2.0 ** -53)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return self.next_u64() % n

    def poisson(self, rate: float) -> int:
        """Poisson draw via Knuth's product-of-uniforms method."""
        if rate <= 0.0:
            return 0
        limit = math.exp(-rate)
        k = 0
        p = 1.0
        while True:
            p *= self.random()
            if p <= limit:
                return k
            k += 1

    def geometric(self, mean: float) -> int:
        """Geometric draw on {1, 2, ...} with the given mean."""
        if mean <= 1.0:
            return 1
        u = self.random()
        # inversion of P(X > k) = (1 - 1/mean)^k
        return 1 + int(math.log(1.0 - u) / math.log(1.0 - 1.0 / mean))
