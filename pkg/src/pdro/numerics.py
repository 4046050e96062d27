"""Elementary numerics shared by every other module.

Seeded randomness goes through :class:`Rng`, a thin wrapper around numpy's
counter-based Philox4x64 bit generator. Philox's round constants are fixed by
its published definition (Salmon et al., 2011), so a given seed yields the
same raw bit stream on every platform.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np


class NumericalError(ArithmeticError):
    """Raised when a computation would produce or has produced NaN/Inf."""


def ensure_finite(values, what: str = "value") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite {what} encountered")
    return arr


class Rng:
    """Seeded random stream. Single owner; never share between threads."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, tag: int) -> "Rng":
        """Independent child stream, determined by (seed, tag) only."""
        mixed = (self.seed * 0x9E3779B97F4A7C15 + int(tag) * 0xBF58476D1CE4E5B9 + 1) & 0xFFFFFFFFFFFFFFFF
        return Rng(mixed)

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc, scale, size)

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size=None, p=None):
        return self._gen.choice(n, size=size, p=p)

    def binomial(self, n, p, size=None):
        return self._gen.binomial(n, p, size)

    def random_bits(self, n: int) -> np.ndarray:
        """Raw 64-bit words straight from the bit generator."""
        return self._gen.bit_generator.random_raw(n)


def log_sum_exp(values) -> float:
    """Stable ``log(sum(exp(values)))`` via max-shifting."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("log_sum_exp of an empty vector")
    ensure_finite(v, "input to log_sum_exp")
    m = v.max()
    return float(m + math.log(np.exp(v - m).sum()))


def softmax(logits, axis: int = -1) -> np.ndarray:
    z = ensure_finite(logits, "logit")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = ensure_finite(logits, "logit")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def log1pexp(z):
    """``log(1 + exp(z))`` without overflow, elementwise."""
    z = np.asarray(z, dtype=np.float64)
    return np.logaddexp(0.0, z)


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def finite_difference(f: Callable[[np.ndarray], float], point) -> np.ndarray:
    """Central differences with per-coordinate step ``1e-5 * (1 + |x_i|)``."""
    x0 = np.array(point, dtype=np.float64).ravel()
    grad = np.empty_like(x0)
    for i in range(x0.size):
        h = 1e-5 * (1.0 + abs(x0[i]))
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += h
        xm[i] -= h
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NumericalError(f"objective not finite near coordinate {i}")
        grad[i] = (fp - fm) / (xp[i] - xm[i])
    return grad


def check_gradient(f, g, point, floor: float = 1e-6) -> float:
    """Max over coordinates of |g - fd| / max(|g|, |fd|, floor).

    ``floor`` keeps coordinates whose true derivative is ~0 from reporting
    huge relative errors caused by round-off alone.
    """
    x0 = np.array(point, dtype=np.float64).ravel()
    analytic = np.asarray(g(x0.copy()), dtype=np.float64).ravel()
    numeric = finite_difference(f, x0)
    if analytic.shape != numeric.shape:
        raise ValueError("gradient has wrong dimension")
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
