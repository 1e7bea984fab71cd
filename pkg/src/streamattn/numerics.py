"""Shared numerical primitives: softmax, its vector-Jacobian product, RNG, FD oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np


class OracleError(RuntimeError):
    """Raised when the finite-difference oracle hits a non-finite evaluation."""

    def __init__(self, index: int, value: float):
        super().__init__(f"non-finite function value {value!r} at coordinate {index}")
        self.index = index
        self.value = value


def stable_softmax(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("softmax needs a non-empty 1-D vector")
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax input contains non-finite entries")
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_vjp(p, g) -> np.ndarray:
    """Return g^T J for J = diag(p) - p p^T without forming J."""
    p = np.asarray(p, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: p{p.shape} vs g{g.shape}")
    return p * (g - np.dot(g, p))


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat vector."""
    if h <= 0:
        raise ValueError("step size must be positive")
    x = np.array(x, dtype=np.float64).ravel()
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = float(f(x))
        x[i] = orig - h
        fm = float(f(x))
        x[i] = orig
        if not np.isfinite(fp):
            raise OracleError(i, fp)
        if not np.isfinite(fm):
            raise OracleError(i, fm)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


class Rng:
    """Seeded generator backed by Philox4x64-10.

    Philox is counter-based: the stream is a pure function of (key=seed, counter),
    so a given seed yields the same draws on every platform and numpy version
    that keeps the ``Generator`` distribution algorithms stable.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(self.seed))

    def normal(self, size=None, scale: float = 1.0) -> np.ndarray:
        return self._gen.standard_normal(size) * scale

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def spawn(self, offset: int) -> "Rng":
        """Independent child stream for a sub-task."""
        return Rng((self.seed * 0x9E3779B97F4A7C15 + offset + 1) & 0xFFFFFFFFFFFFFFFF)
