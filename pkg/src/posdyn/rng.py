"""Counter-based random streams.

Every random draw in the package is a pure function of
``(seed, stream index, counter)``: the stream key is ``mix64(seed ^ index)``
and draw number ``c`` (1-based) is ``mix64(key + c * GOLDEN)``, i.e. the
SplitMix64 output sequence started at ``key``.  Trajectory ``i`` of a batch
therefore sees the same variates whether it is simulated alone, inside a
vectorised numpy batch, or inside a compiled kernel, and regardless of how the
batch is split.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
TWO_M53 = 2.0**-53

GOLDEN_U64 = np.uint64(GOLDEN)


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def stream_key(seed: int, index: int = 0) -> int:
    return mix64((int(seed) ^ int(index)) & MASK64)


def derive_seed(seed: int, *labels: int) -> int:
    """Fold integer labels into a seed (used for per-cell / per-strategy seeds)."""
    s = int(seed) & MASK64
    for lab in labels:
        s = mix64(s ^ ((int(lab) * GOLDEN) & MASK64))
    return s


class Stream:
    """Scalar view of one stream; ``uniform`` consumes exactly one draw."""

    __slots__ = ("seed", "index", "key", "counter")

    def __init__(self, seed: int, index: int = 0):
        self.seed = int(seed) & MASK64
        self.index = int(index)
        self.key = stream_key(self.seed, self.index)
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return mix64((self.key + self.counter * GOLDEN) & MASK64)

    def uniform(self) -> float:
        """Uniform on [0, 1)."""
        return (self.next_u64() >> 11) * TWO_M53

    def uniform_open(self) -> float:
        """Uniform on (0, 1]."""
        return ((self.next_u64() >> 11) + 1) * TWO_M53

    def normal(self) -> float:
        u1 = self.uniform_open()
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


# -- vectorised (numpy uint64) versions ------------------------------------


def mix64_array(z):
    z = z ^ (z >> np.uint64(30))
    z = z * np.uint64(_M1)
    z = z ^ (z >> np.uint64(27))
    z = z * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def stream_keys(seed: int, indices) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.uint64)
    return mix64_array(np.uint64(int(seed) & MASK64) ^ idx)


def draw_u64(keys: np.ndarray, counter) -> np.ndarray:
    c = np.asarray(counter, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64_array(keys + c * GOLDEN_U64)


def uniforms(keys: np.ndarray, counter) -> np.ndarray:
    """Uniform [0, 1) draw number ``counter`` for each key."""
    return (draw_u64(keys, counter) >> np.uint64(11)).astype(np.float64) * TWO_M53


def uniforms_open(keys: np.ndarray, counter) -> np.ndarray:
    z = draw_u64(keys, counter) >> np.uint64(11)
    return (z.astype(np.float64) + 1.0) * TWO_M53


def normals(keys: np.ndarray, counter) -> np.ndarray:
    """Box-Muller normal consuming draws ``counter`` and ``counter + 1``."""
    u1 = uniforms_open(keys, counter)
    u2 = uniforms(keys, np.asarray(counter, dtype=np.uint64) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
