"""Seeded randomness, Gaussian densities and numerical oracles.

Random streams come from PCG64 (128-bit LCG state, XSL-RR output, 64-bit
words) as shipped by numpy, seeded through ``numpy.random.SeedSequence``.
Both are specified bit-for-bit and platform independent.  Uniform doubles
take the top 53 bits of each word; normal variates use Box-Muller on those
uniforms, so nothing depends on numpy's own (version-dependent) samplers.
"""

from __future__ import annotations

import math
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidArgument, NumericOverflow

LOG_2PI = math.log(2.0 * math.pi)
_INV_2_53 = 1.0 / 9007199254740992.0


class SeededRng:
    """Single-owner PCG64 stream.

    ``stream`` is a tuple of non-negative ints; different tuples give
    statistically independent sub-streams of the same seed.
    """

    algorithm = "PCG64/XSL-RR via SeedSequence; Box-Muller normals"

    def __init__(self, seed: int, stream: tuple[int, ...] = ()):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise InvalidArgument(f"seed must fit in 64 unsigned bits, got {seed}")
        self.seed = seed
        self.stream = tuple(int(s) for s in stream)
        self._bits = np.random.PCG64(
            np.random.SeedSequence(entropy=seed, spawn_key=self.stream)
        )

    def spawn(self, index: int) -> "SeededRng":
        return SeededRng(self.seed, self.stream + (int(index),))

    def raw(self, n: int) -> np.ndarray:
        return self._bits.random_raw(int(n))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1)."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        words = self.raw(2 * m) >> np.uint64(11)
        # u1 in (0, 1] keeps the logarithm finite
        u1 = (words[0::2].astype(np.float64) + 1.0) * _INV_2_53
        u2 = words[1::2].astype(np.float64) * _INV_2_53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def choice(self, n: int, size: int) -> np.ndarray:
        """``size`` distinct indices from ``range(n)``."""
        if size > n:
            raise InvalidArgument(f"cannot draw {size} distinct items from {n}")
        return self.permutation(n)[:size]

    def get_state(self) -> dict:
        return self._bits.state

    def set_state(self, state: dict) -> None:
        self._bits.state = state


def as_vector(x, name: str = "x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.size == 0:
        raise InvalidArgument(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite values")
    return arr


def std_normal_logpdf(z) -> float | np.ndarray:
    """Log density of N(0, I); a 2-D input is treated as a batch of rows."""
    z = as_vector(z, "z")
    d = z.shape[-1]
    return -0.5 * (np.sum(z * z, axis=-1) + d * LOG_2PI)


def sample_std_normal(rng: SeededRng, d: int) -> np.ndarray:
    if d < 1:
        raise InvalidArgument(f"dimension must be >= 1, got {d}")
    return rng.normal(d)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise InvalidArgument("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericOverflow(f"non-finite function value at component {i}", where=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


class PCAResult(NamedTuple):
    basis: np.ndarray  # (2, d), orthonormal rows
    points: np.ndarray  # (n, 2)
    mean: np.ndarray
    variances: np.ndarray  # explained variance of the two components


def pca_top2(data) -> PCAResult:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 3 or data.shape[1] < 2:
        raise InvalidArgument("PCA needs at least 3 points of dimension >= 2")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / (data.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:2]
    basis = evecs[:, order].T.copy()
    # fix the sign so the largest-magnitude entry of each axis is positive
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return PCAResult(basis, centered @ basis.T, mean, evals[order])


def project(result: PCAResult, data) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) - result.mean) @ result.basis.T
