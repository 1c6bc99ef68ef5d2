"""Dense float64 math substrate and the seeded RNG shared by every module.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; vectors
are 1-D arrays.  Reductions run in a single fixed order so results are
bit-stable run to run.

The random generator is xoshiro256** (Blackman & Vigna) seeded through
splitmix64.  It is implemented here in pure Python so that task generation
and span sampling are byte-reproducible on every platform, independent of
numpy's or torch's generator versions.
"""

from __future__ import annotations

import math
from typing import MutableSequence, Sequence, TypeVar

import numpy as np

_MASK64 = (1 << 64) - 1
_T = TypeVar("_T")


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def as_vector(z, name: str = "vector") -> np.ndarray:
    v = np.asarray(z, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    return v


def matmul(a, b) -> np.ndarray:
    """Matrix product with a fixed accumulation order over the inner index.

    The sum over the shared dimension is accumulated left to right as a
    sequence of rank-1 updates, so no BLAS-dependent reassociation occurs.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} @ {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for p in range(a.shape[1]):
        out += a[:, p : p + 1] * b[p : p + 1, :]
    return out


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def log_sum_exp(z) -> float:
    z = as_vector(z)
    if z.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("log_sum_exp requires finite entries")
    m = float(z.max())
    return m + math.log(float(np.sum(np.exp(z - m))))


def softmax_row(z) -> np.ndarray:
    z = as_vector(z)
    if z.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite entries")
    e = np.exp(z - z.max())
    return e / np.sum(e)


def _splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & _MASK64


def derive_seed(*keys: int) -> int:
    """Mix a tuple of integers into one 64-bit seed (splitmix64 chaining)."""
    state = 0
    out = 0
    for key in keys:
        state, out = _splitmix64(state ^ (int(key) & _MASK64))
    return out


class Rng:
    """xoshiro256** generator.

    ``Rng(seed)`` expands the 64-bit seed into the 256-bit state with four
    splitmix64 outputs.  Derived draws:

    * ``random()``: top 53 bits of one output scaled to [0, 1).
    * ``integers(lo, hi)``: uniform on [lo, hi) by rejection on the full
      64-bit output (no modulo bias).
    * ``normal()``: Box-Muller on two ``random()`` draws, cosine branch only.

    Not thread-safe; give each worker its own instance (see ``spawn``).
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        sm = self.seed
        s = []
        for _ in range(4):
            sm, out = _splitmix64(sm)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Rng":
        if len(state) != 4 or not any(state):
            raise ValueError("xoshiro256** needs four words, not all zero")
        rng = cls.__new__(cls)
        rng.seed = 0
        rng._s = [int(w) & _MASK64 for w in state]
        return rng

    @property
    def state(self) -> tuple[int, int, int, int]:
        return tuple(self._s)  # type: ignore[return-value]

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self._s
        result = (_rotl((s1 * 5) & _MASK64, 7) * 9) & _MASK64
        t = (s1 << 17) & _MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def integers(self, lo: int, hi: int) -> int:
        n = hi - lo
        if n <= 0:
            raise ValueError(f"empty range [{lo}, {hi})")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return lo + x % n

    def normal(self, mean: float = 0.0, std: float = 1.0) -> float:
        u1 = 1.0 - self.random()  # (0, 1]
        u2 = self.random()
        return mean + std * math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def choice(self, seq: Sequence[_T]) -> _T:
        return seq[self.integers(0, len(seq))]

    def shuffle(self, seq: MutableSequence) -> None:
        # Fisher-Yates, from the back
        for i in range(len(seq) - 1, 0, -1):
            j = self.integers(0, i + 1)
            seq[i], seq[j] = seq[j], seq[i]

    def spawn(self, key: int) -> "Rng":
        """Independent child stream keyed by ``key``; does not advance self."""
        return Rng(derive_seed(self.seed, key, *self._s))

    def numpy(self) -> np.random.Generator:
        """A numpy PCG64 generator seeded from the next output, for bulk arrays."""
        return np.random.Generator(np.random.PCG64(self.next_u64()))

    def normal_array(self, shape, std: float = 1.0) -> np.ndarray:
        return self.numpy().normal(0.0, std, size=shape)
