"""Portable seeded randomness: splitmix64 stream + Box-Muller normals.

Output ``i`` (counting from 1) of a stream seeded with ``s`` is
``mix(s + i * GAMMA)`` (mod 2**64), so blocks can be drawn vectorised and
still match one-at-a-time draws exactly.
"""

from __future__ import annotations

import math

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
MASK = (1 << 64) - 1
_TWO_M53 = 2.0 ** -53


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & MASK

    def next_u64(self) -> int:
        self.state = (self.state + GAMMA) & MASK
        return _mix(self.state)

    def u64_block(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GAMMA)
            out = _mix_array(z)
        self.state = (self.state + n * GAMMA) & MASK
        return out

    def uniform(self) -> float:
        """Uniform on [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * _TWO_M53

    def uniform_block(self, n: int) -> np.ndarray:
        return (self.u64_block(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n). Modulo bias is below 2**-40 for the
        small ranges used here."""
        return self.next_u64() % n

    def gauss(self, mean: float = 0.0, std: float = 1.0) -> float:
        # two uniforms per normal; only the cosine branch is used
        u1 = 1.0 - self.uniform()
        u2 = self.uniform()
        return mean + std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gauss_block(self, n: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        u = self.uniform_block(2 * n).reshape(n, 2)
        u1 = 1.0 - u[:, 0]
        u2 = u[:, 1]
        return mean + std * np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def shuffle(self, items: list) -> list:
        """Fisher-Yates, returns a new list."""
        out = list(items)
        for i in range(len(out) - 1, 0, -1):
            j = self.randint(i + 1)
            out[i], out[j] = out[j], out[i]
        return out

    def spawn(self, tag: int) -> "SplitMix64":
        """Independent child stream keyed by ``tag``."""
        return SplitMix64(_mix((self.state ^ (tag * GAMMA)) & MASK))
