"""Deterministic, splittable, counter-based random streams.

Every random draw in this package comes from the SplitMix64 finalizer used
in counter mode, so a stream is a pure function of ``(key, counter)`` and a
whole experiment is a pure function of one 64-bit seed.  The exact stream
definition (all arithmetic mod 2**64):

    mix64(z):  z ^= z >> 30;  z *= 0xBF58476D1CE4E5B9
               z ^= z >> 27;  z *= 0x94D049BB133111EB
               return z ^ (z >> 31)

    draw i of stream with key k:   u64_i = mix64(k + (i + 1) * GOLDEN)
    child stream with index j:     key'  = mix64((k ^ STREAM_SALT) + j * GOLDEN)

    uniform in [0, 1):   (u64 >> 11) * 2**-53
    normal:              Box-Muller; draw 2i holds u1 = ((u64 >> 11) + 1) * 2**-53,
                         draw 2i+1 holds u2; z = sqrt(-2 ln u1) * cos(2 pi u2)

with GOLDEN = 0x9E3779B97F4A7C15 and STREAM_SALT = 0xD2B74407B1CE6E93.
Any implementation of this recipe reproduces identical streams, and split
streams can be consumed in parallel without coordination.
"""

from __future__ import annotations

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
STREAM_SALT = 0xD2B74407B1CE6E93
_MASK = (1 << 64) - 1

_U = np.uint64
_G = _U(GOLDEN)
_M1 = _U(0xBF58476D1CE4E5B9)
_M2 = _U(0x94D049BB133111EB)
_S30, _S27, _S31, _S11 = _U(30), _U(27), _U(31), _U(11)
_INV53 = float(2.0 ** -53)


def mix64(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def _mix64_vec(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


class Rng:
    """One stream: immutable key plus a draw counter."""

    __slots__ = ("key", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.key = int(seed) & _MASK
        self.counter = int(counter)

    def split(self, index: int) -> "Rng":
        """Independent child stream; pure function of (key, index)."""
        if index < 0:
            raise ValueError("stream index must be non-negative")
        return Rng(mix64(((self.key ^ STREAM_SALT) + index * GOLDEN) & _MASK))

    def next_u64(self) -> int:
        self.counter += 1
        return mix64((self.key + self.counter * GOLDEN) & _MASK)

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw draws as a uint64 vector (same stream as next_u64)."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix64_vec(_U(self.key) + idx * _G)

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size=None):
        """Uniform floats in [lo, hi); scalar when size is None."""
        if size is None:
            u = (self.next_u64() >> 11) * _INV53
            return lo + (hi - lo) * u
        n = int(np.prod(size))
        u = (self.u64(n) >> _S11).astype(np.float64) * _INV53
        return (lo + (hi - lo) * u).reshape(size)

    def normal(self, mu: float = 0.0, sigma: float = 1.0, size=None):
        """Gaussian draws via Box-Muller; consumes two u64 per value."""
        if size is None:
            return float(self.normal(mu, sigma, size=1)[0])
        n = int(np.prod(size))
        raw = self.u64(2 * n)
        u1 = ((raw[0::2] >> _S11).astype(np.float64) + 1.0) * _INV53
        u2 = (raw[1::2] >> _S11).astype(np.float64) * _INV53
        z = np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
        return (mu + sigma * z).reshape(size)

    def bernoulli(self, p: float, size=None):
        """Boolean draws, True with probability ``p``."""
        return self.uniform(size=size) < p

    def randint(self, n: int) -> int:
        """Integer in [0, n). Intended for small n (bias < 2**-40 for n < 2**13)."""
        return min(int(self.uniform() * n), n - 1)

    def shuffle(self, items: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randint(i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, items):
        return items[self.randint(len(items))]
