"""Comparison dropout variants adapted to bags of instances.

``spatial_dropout`` and ``attention_dropout`` are instance-level stand-ins
for methods originally defined on image feature maps.
"""
from __future__ import annotations

import numpy as np

from .numerics import Rng, as_matrix
from .pdl import apba

KINDS = ("vanilla", "spatial", "dropinstance", "attentiondrop")


def _check_rate(p: float) -> None:
    if not 0.0 <= p < 1.0:
        raise ValueError(f"drop rate must lie in [0, 1), got {p}")


def vanilla_mask(shape, p: float, rng: Rng) -> np.ndarray:
    _check_rate(p)
    if p == 0.0:
        return np.ones(shape)
    keep = rng.uniform(shape) >= p
    return keep / (1.0 - p)


def spatial_mask(shape, p: float, rng: Rng) -> np.ndarray:
    _check_rate(p)
    K, C = shape
    if p == 0.0:
        return np.ones((1, C))
    keep = rng.uniform(C) >= p
    return (keep / (1.0 - p))[None, :]


def attention_drop_mask(embeddings, threshold: float) -> np.ndarray:
    """Row keep mask (K x 1) zeroing instances whose max-normalised APBA weight exceeds ``threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    v = as_matrix(embeddings)
    if v.shape[0] == 0:
        raise ValueError("empty bag")
    w = apba(v)
    drop = (w / w.max()) > threshold
    if drop.all():
        drop[:] = False
    return (~drop).astype(np.float64)[:, None]


def vanilla_dropout(features, p: float, rng: Rng) -> np.ndarray:
    x = as_matrix(features)
    return x * vanilla_mask(x.shape, p, rng)


def spatial_dropout(features, p: float, rng: Rng) -> np.ndarray:
    """Drop whole feature columns (channels) shared by every instance."""
    x = as_matrix(features)
    return x * spatial_mask(x.shape, p, rng)


def attention_dropout(embeddings, threshold: float, rng: Rng | None = None) -> np.ndarray:
    # Deterministic: the rng argument only keeps the call shape uniform.
    x = as_matrix(embeddings)
    return x * attention_drop_mask(x, threshold)


def drop_instance_indices(K: int, fraction: float, rng: Rng) -> np.ndarray:
    """Sorted indices of the instances that survive DropInstance."""
    _check_rate(fraction)
    if K < 1:
        raise ValueError("bag has no instances")
    n_drop = int(np.floor(fraction * K + 0.5))
    if n_drop == 0:
        return np.arange(K)
    if n_drop >= K:
        return np.array([int(rng.integers(0, K))])
    return np.sort(rng.permutation(K)[n_drop:])


def drop_instance(bag, fraction: float, rng: Rng):
    """Copy of ``bag`` with ``round(fraction * K)`` random instances removed (at least one kept)."""
    keep = drop_instance_indices(bag.size, fraction, rng)
    return bag.subset(keep)
