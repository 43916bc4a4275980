"""Seed plumbing.

One run seed fans out into named sub-streams so that adding a new consumer
never shifts the draws of an existing one.
"""

import zlib

import numpy as np

# Knuth's MMIX LCG constants
LCG_MULTIPLIER = 6364136223846793005
LCG_INCREMENT = 1442695040888963407
_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def substream(seed, name):
    """Independent ``numpy`` generator for ``(seed, name)``."""
    return np.random.default_rng([int(seed) & _MASK64, zlib.crc32(name.encode("utf-8"))])


def lcg_next(state):
    return (state * LCG_MULTIPLIER + LCG_INCREMENT) & _MASK64


def keyed_choice(seed, index, n):
    """Pick one of ``n`` options for item ``index`` under ``seed``.

    The state is keyed on ``(seed, index)`` alone, so the pick does not depend
    on iteration order. Two LCG steps decorrelate neighbouring keys; the high
    32 bits are used because an LCG's low bits have short periods.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    state = ((int(seed) & _MASK64) * _GOLDEN + int(index)) & _MASK64
    state = lcg_next(lcg_next(state))
    return ((state >> 32) * n) >> 32
