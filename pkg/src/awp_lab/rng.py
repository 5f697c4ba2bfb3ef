"""Counter-based splitmix64 streams.

A stream is a 64-bit key plus a counter; draw ``i`` is
``mix64(key + (i + 1) * GOLDEN)``, the splitmix64 output function, so any
block of draws is one vectorised numpy expression. Child streams are keyed
by mixing the parent key with integer labels, which keeps e.g. the PGD
random start of batch 3 in epoch 7 independent of how many draws other
consumers made. Gaussians use Box-Muller.

Bit-exact within this implementation only.
"""

from __future__ import annotations

import numpy as np

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def mix64(x: int) -> int:
    """Scalar splitmix64 finaliser."""
    z = x & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


_LCG = 0xD1342543DE82EF95


def _absorb(key: int, label: int) -> int:
    # the odd multiplier makes absorption order-sensitive: (a, b) != (b, a)
    return mix64((key * _LCG + mix64((label & MASK) + GOLDEN)) & MASK)


def derive_key(seed: int, *labels: int) -> int:
    key = mix64((seed & MASK) + GOLDEN)
    for lab in labels:
        key = _absorb(key, lab)
    return key


class Stream:
    def __init__(self, seed: int = 0, *labels: int, counter: int = 0):
        self.key = derive_key(int(seed), *labels)
        self.counter = counter

    @classmethod
    def from_state(cls, state: dict) -> "Stream":
        s = cls.__new__(cls)
        s.key = int(state["key"])
        s.counter = int(state["counter"])
        return s

    def state(self) -> dict:
        return {"key": self.key, "counter": self.counter}

    def child(self, *labels: int) -> "Stream":
        s = Stream.__new__(Stream)
        s.key = self.key
        for lab in labels:
            s.key = _absorb(s.key, lab)
        s.counter = 0
        return s

    def bits(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.key) + idx * np.uint64(GOLDEN)
        return _mix_array(z)

    def random(self, shape=()) -> np.ndarray:
        """Uniform doubles in [0, 1) with 53 random bits."""
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return low + (high - low) * self.random(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u1 = 1.0 - self.random((m,))  # (0, 1], keeps log finite
        u2 = self.random((m,))
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
        return z[:n].reshape(shape)

    def integers(self, high: int, shape=()) -> np.ndarray:
        """Uniform integers in [0, high) by multiply-shift on the top 32 bits."""
        n = int(np.prod(shape, dtype=np.int64))
        top = self.bits(n) >> np.uint64(32)
        return ((top * np.uint64(high)) >> np.uint64(32)).astype(np.int64).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = np.arange(n)
        if n < 2:
            return perm
        u = self.random((n - 1,))
        for k, i in enumerate(range(n - 1, 0, -1)):
            j = int(u[k] * (i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm
