"""Deterministic random streams for weight init and synthetic fixtures.

All randomness in the package flows through SplitMix64 so that a seed pins
every generated tensor bit-for-bit, independent of numpy's global state.

Reference stream, seed 0 (first three outputs):
    0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F
Seed 42:
    0xBDD732262FEB6E95, 0x28EFE333B266F103, 0x47526757130F9F52
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


class SplitMix64:
    """64-bit SplitMix64 generator. Identical seed, identical sequence."""

    __slots__ = ("state",)

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GOLDEN) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def next_float(self) -> float:
        """Uniform in [0, 1) with 64-bit resolution."""
        return self.next_u64() / 2.0**64

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.next_float()

    def fill(self, shape: tuple[int, ...], lo: float, hi: float) -> np.ndarray:
        """Row-major array of uniform draws; draw order is the flat index order.

        The generator state after k draws is seed + k * golden (mod 2^64), so
        the whole block is computed vectorized; outputs are bit-identical to
        calling uniform() in a loop.
        """
        n = 1
        for s in shape:
            n *= s
        ks = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + ks * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK64
        u = z.astype(np.float64) / 2.0**64
        return (lo + (hi - lo) * u).reshape(shape)
