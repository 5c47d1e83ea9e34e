"""Deterministic pseudo-random streams.

The generator is xoshiro256** seeded through splitmix64, implemented from the
published algorithm so that the byte-for-byte output sequence depends only on
this file, never on interpreter or library versions. Every consumer derives a
private stream from the master seed plus a tuple of string labels; streams
derived from distinct label tuples are independent, and re-deriving the same
tuple replays the identical sequence. That property is what makes checkpoint
resume and repeated runs bitwise reproducible without serializing generator
state.
"""

from __future__ import annotations

import math

import numpy as np

_MASK64 = (1 << 64) - 1
_DOUBLE_UNIT = 2.0 ** -53
# FNV-1a 64-bit constants, used only to fold label bytes into the seed chain.
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def splitmix64(x: int) -> int:
    """One output of the splitmix64 sequence started at state x."""
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def _fnv1a(data: bytes) -> int:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


def derive_seed(master: int, *labels) -> int:
    """Fold labels into a master seed, one splitmix64 step per label.

    Labels may be strings or integers; they are hashed by value, so
    derive_seed(s, "noise", 3) == derive_seed(s, "noise", 3) always, and any
    change to a label produces an unrelated seed.
    """
    h = splitmix64(master & _MASK64)
    for label in labels:
        h = splitmix64(h ^ _fnv1a(str(label).encode("utf-8")))
    return h


class Xoshiro256StarStar:
    """xoshiro256** with splitmix64 state expansion."""

    __slots__ = ("_s0", "_s1", "_s2", "_s3")

    def __init__(self, seed: int):
        s = seed & _MASK64
        state = []
        for _ in range(4):
            state.append(splitmix64(s))
            s = (s + 0x9E3779B97F4A7C15) & _MASK64
        if not any(state):
            state[0] = 1  # the all-zero state is a fixed point
        self._s0, self._s1, self._s2, self._s3 = state

    @classmethod
    def from_state(cls, state: tuple[int, int, int, int]) -> "Xoshiro256StarStar":
        if not any(state):
            raise ValueError("all-zero state is invalid")
        obj = cls.__new__(cls)
        obj._s0, obj._s1, obj._s2, obj._s3 = (x & _MASK64 for x in state)
        return obj

    def state(self) -> tuple[int, int, int, int]:
        return (self._s0, self._s1, self._s2, self._s3)

    def next_u64(self) -> int:
        s1 = self._s1
        x = (s1 * 5) & _MASK64
        result = (((x << 7) | (x >> 57)) & _MASK64) * 9 & _MASK64
        t = (s1 << 17) & _MASK64
        s2 = self._s2 ^ self._s0
        s3 = self._s3 ^ s1
        self._s1 = s1 ^ s2
        self._s0 = self._s0 ^ s3
        self._s2 = s2 ^ t
        self._s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        return result

    def _u64_array(self, n: int) -> np.ndarray:
        # Inlined update loop: the per-call overhead of next_u64 dominates
        # bulk generation, and noise draws need millions of values.
        s0, s1, s2, s3 = self._s0, self._s1, self._s2, self._s3
        out = [0] * n
        for i in range(n):
            x = (s1 * 5) & _MASK64
            out[i] = (((x << 7) | (x >> 57)) & _MASK64) * 9 & _MASK64
            t = (s1 << 17) & _MASK64
            s2 ^= s0
            s3 ^= s1
            s1 ^= s2
            s0 ^= s3
            s2 ^= t
            s3 = ((s3 << 45) | (s3 >> 19)) & _MASK64
        self._s0, self._s1, self._s2, self._s3 = s0, s1, s2, s3
        return np.array(out, dtype=np.uint64)

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * _DOUBLE_UNIT

    def uniforms(self, n: int) -> np.ndarray:
        """n uniform doubles in [0, 1), identical to n random() calls."""
        bits = self._u64_array(n) >> np.uint64(11)
        return bits.astype(np.float64) * _DOUBLE_UNIT

    def normals(self, n: int) -> np.ndarray:
        """n standard normal doubles via Box-Muller.

        Each call consumes ceil(n/2) uniform pairs and discards the unused
        half of an odd tail, so the generator state after normals(n) depends
        only on n, never on the values drawn.
        """
        if n == 0:
            return np.zeros(0, dtype=np.float64)
        pairs = (n + 1) // 2
        bits = self._u64_array(2 * pairs)
        # u1 in (0, 1] so the log is finite; u2 in [0, 1).
        u1 = ((bits[:pairs] >> np.uint64(11)).astype(np.float64) + 1.0) * _DOUBLE_UNIT
        u2 = (bits[pairs:] >> np.uint64(11)).astype(np.float64) * _DOUBLE_UNIT
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection."""
        if n <= 0:
            raise ValueError("randbelow needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, seq: list) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(seq) - 1, 0, -1):
            j = self.randbelow(i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def sample(self, n: int, k: int) -> list[int]:
        """k distinct integers from range(n), by partial Fisher-Yates."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot sample {k} from {n}")
        pool = list(range(n))
        for i in range(k):
            j = i + self.randbelow(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]


def stream(master: int, *labels) -> Xoshiro256StarStar:
    """Private generator for the given purpose labels under a master seed."""
    return Xoshiro256StarStar(derive_seed(master, *labels))
