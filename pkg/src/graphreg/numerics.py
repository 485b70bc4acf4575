"""Shared linear-algebra and random-number primitives.

Vectors and matrices are plain float64 numpy arrays. Randomness comes from
numpy's PCG64 bit generator seeded through ``SeedSequence``; PCG64 produces
the same raw stream on every platform, and every consumer in this package
derives its generator through :func:`make_rng` so a (seed, stream key)
pair fully determines the draws.
"""

from __future__ import annotations

import numpy as np

from graphreg.errors import InvalidArgumentError

DTYPE = np.float64


def as_vector(values, name: str = "vector") -> np.ndarray:
    v = np.asarray(values, dtype=DTYPE)
    if v.ndim != 1 or v.size == 0:
        raise InvalidArgumentError(f"{name} must be a nonempty 1-D array, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return v


def as_matrix(values, name: str = "matrix") -> np.ndarray:
    m = np.asarray(values, dtype=DTYPE)
    if m.ndim != 2 or m.shape[0] == 0 or m.shape[1] == 0:
        raise InvalidArgumentError(f"{name} must be a nonempty 2-D array, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidArgumentError(f"{name} has non-finite entries")
    return m


def matvec(m, v) -> np.ndarray:
    m = as_matrix(m, "m")
    v = as_vector(v, "v")
    if m.shape[1] != v.shape[0]:
        raise InvalidArgumentError(f"cannot multiply {m.shape} matrix by {v.shape[0]}-vector")
    return m @ v


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Generator for ``seed`` and an optional integer stream key.

    Distinct stream keys give statistically independent generators, so
    components that draw from separate streams cannot perturb each other.
    """
    if seed < 0 or seed >= 2**64:
        raise InvalidArgumentError(f"seed must be a 64-bit unsigned integer, got {seed}")
    if any(s < 0 for s in stream):
        raise InvalidArgumentError("stream keys must be nonnegative")
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.PCG64(ss))


def sample_without_replacement(rng: np.random.Generator, population: int, k: int) -> np.ndarray:
    """``k`` distinct indices from ``range(population)``, uniform over k-subsets, sorted."""
    if population < 0 or k < 0:
        raise InvalidArgumentError("population and k must be nonnegative")
    if k > population:
        raise InvalidArgumentError(f"cannot draw {k} distinct items from {population}")
    if k == 0:
        return np.empty(0, dtype=np.int64)
    picked = rng.choice(population, size=k, replace=False)
    return np.sort(picked.astype(np.int64))
