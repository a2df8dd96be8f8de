"""Dense helpers, seeded randomness and finite-difference gradient checks.

Matrices are plain ``numpy`` float64 arrays; this module only adds the
shape/finiteness checks and reproducible random streams the rest of the
package relies on.
"""
from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np


class Rng:
    """Seeded random stream with reproducible, label-addressed forks."""

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = _path
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence([self.seed, *_path])))

    def fork(self, label: str | int) -> "Rng":
        # Independent of how many draws the parent has made.
        digest = hashlib.sha256(str(label).encode("utf-8")).digest()
        word = int.from_bytes(digest[:4], "little")
        return Rng(self.seed, self._path + (word,))

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def bernoulli(self, p, size=None) -> np.ndarray:
        """0/1 draws that are 1 with probability ``p``."""
        return (self._gen.random(size) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite entries in matrix product")
    return out


def stable_softmax(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(x)):
        raise ValueError("softmax input must be finite")
    e = np.exp(x - x.max())
    return e / e.sum()


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # Split by sign so neither branch overflows.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x,
    eps: float = 1e-5,
) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f`` maps a parameter vector to ``(value, gradient)``. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError("eps must lie in [1e-7, 1e-4]")
    x = np.array(x, dtype=np.float64).ravel()
    value, grad = f(x.copy())
    if not np.isfinite(value):
        raise ValueError("f(x) is not finite")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != x.shape:
        raise ValueError("gradient shape does not match parameter vector")
    worst = 0.0
    for i in range(x.size):
        xp = x.copy()
        xp[i] += eps
        xm = x.copy()
        xm[i] -= eps
        numeric = (f(xp)[0] - f(xm)[0]) / (2.0 * eps)
        err = abs(grad[i] - numeric) / max(1.0, abs(grad[i]))
        worst = max(worst, err)
    return worst
