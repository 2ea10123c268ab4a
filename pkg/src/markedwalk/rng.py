"""Portable random streams.

Every chain owns one xoshiro256** generator whose 256-bit state lives in a
``uint64[4]`` array, so compiled kernels and the pure-Python fallback draw
identical numbers. Seeding and per-chain derivation use splitmix64:

* ``Stream(seed)`` fills the four state words with successive splitmix64
  outputs starting from ``seed``.
* ``derive_seed(seed, i, j, ...)`` folds each index into the seed with
  ``h = mix64(h ^ mix64(k + 0x9E3779B97F4A7C15))`` where ``mix64`` is the
  splitmix64 finalizer. Chain ``i`` of a run seeded ``s`` uses
  ``derive_seed(s, i)``; sweep cell ``c`` uses ``derive_seed(s, c)`` and its
  chains ``derive_seed(derive_seed(s, c), i)``.

Doubles are ``(x >> 11) * 2**-53`` in [0, 1); integers below ``n`` are
``floor(double * n)``.
"""

from __future__ import annotations

import numpy as np

from ._accel import kernel, quiet_wraparound

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_sequence(seed: int, count: int) -> list[int]:
    out = []
    x = seed & MASK64
    for _ in range(count):
        x = (x + GOLDEN) & MASK64
        out.append(mix64(x))
    return out


def derive_seed(seed: int, *path: int) -> int:
    h = seed & MASK64
    for k in path:
        h = mix64(h ^ mix64((int(k) + GOLDEN) & MASK64))
    return h


@kernel
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@kernel
def next_u64(s):
    s0 = s[0]
    s1 = s[1]
    s2 = s[2]
    s3 = s[3]
    result = _rotl(s1 * np.uint64(5), 7) * np.uint64(9)
    t = s1 << np.uint64(17)
    s2 ^= s0
    s3 ^= s1
    s1 ^= s2
    s0 ^= s3
    s2 ^= t
    s3 = _rotl(s3, 45)
    s[0] = s0
    s[1] = s1
    s[2] = s2
    s[3] = s3
    return result


@kernel
def next_double(s):
    return np.float64(next_u64(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


@kernel
def next_open_closed(s):
    """Uniform on (0, 1]; safe to take a log of."""
    return 1.0 - next_double(s)


@kernel
def randbelow(s, n):
    return np.int64(next_double(s) * n)


class Stream:
    """A seeded xoshiro256** stream usable from Python and from kernels."""

    def __init__(self, seed: int):
        self.seed = int(seed) & MASK64
        words = splitmix64_sequence(self.seed, 4)
        if not any(words):  # all-zero state is a fixed point
            words[0] = 1
        self.state = np.array(words, dtype=np.uint64)

    @classmethod
    def for_chain(cls, seed: int, index: int) -> "Stream":
        return cls(derive_seed(seed, index))

    def random(self) -> float:
        with quiet_wraparound():
            return float(next_double(self.state))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        with quiet_wraparound():
            return int(randbelow(self.state, n))

    def uniform_array(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.float64)
        with quiet_wraparound():
            for i in range(size):
                out[i] = next_double(self.state)
        return out

    def choice(self, seq):
        return seq[self.randbelow(len(seq))]

    def shuffled(self, seq) -> list:
        items = list(seq)
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]
        return items
