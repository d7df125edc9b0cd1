"""Seeded random streams shared by the solvers and instance generators.

All randomness goes through :func:`make_rng`, a PCG64 generator keyed by a
64-bit seed.  Normal deviates are produced with the Box-Muller transform on
top of the uniform stream so that instance generation only depends on the
uniform doubles and bounded integers the generator emits.
"""
from __future__ import annotations

import numpy as np

_SEED_MASK = (1 << 64) - 1


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64-backed generator for a 64-bit ``seed``."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
        raise TypeError(f"seed must be an integer, got {type(seed).__name__}")
    return np.random.Generator(np.random.PCG64(int(seed) & _SEED_MASK))


def uniform_indices(rng: np.random.Generator, m: int, size: int) -> np.ndarray:
    """Draw ``size`` indices uniformly from ``{0, ..., m-1}``.

    ``Generator.integers`` uses Lemire's bounded rejection method, so there is
    no modulo bias.
    """
    if m < 1:
        raise ValueError("m must be positive")
    return rng.integers(0, m, size=size, dtype=np.int64)


def normal(rng: np.random.Generator, size) -> np.ndarray:
    """Standard normal deviates via Box-Muller, consuming pairs of uniforms."""
    shape = (size,) if np.isscalar(size) else tuple(size)
    count = int(np.prod(shape, dtype=np.int64))
    pairs = (count + 1) // 2
    u = rng.random(2 * pairs)
    # 1 - u lies in (0, 1], keeping the logarithm finite
    radius = np.sqrt(-2.0 * np.log1p(-u[0::2]))
    angle = 2.0 * np.pi * u[1::2]
    z = np.empty(2 * pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    return z[:count].reshape(shape)
