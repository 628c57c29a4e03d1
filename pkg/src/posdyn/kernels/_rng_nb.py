"""Scalar SplitMix64 helpers for use inside compiled kernels.

Bit-for-bit the same sequence as :mod:`posdyn.rng`.
"""

import numpy as np

from .._accel import njit

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S11 = np.uint64(11)
_S27 = np.uint64(27)
_S30 = np.uint64(30)
_S31 = np.uint64(31)
_TWO_M53 = 2.0**-53


@njit(inline="always")
def mix64(z):
    z = z ^ (z >> _S30)
    z = z * _M1
    z = z ^ (z >> _S27)
    z = z * _M2
    return z ^ (z >> _S31)


@njit(inline="always")
def key_for(seed, index):
    return mix64(np.uint64(seed) ^ np.uint64(index))


@njit(inline="always")
def uniform(key, counter):
    z = mix64(key + np.uint64(counter) * _GOLDEN)
    return np.float64(z >> _S11) * _TWO_M53


@njit(inline="always")
def uniform_open(key, counter):
    z = mix64(key + np.uint64(counter) * _GOLDEN)
    return (np.float64(z >> _S11) + 1.0) * _TWO_M53
