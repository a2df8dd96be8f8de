import math

import numpy as np
import pytest

from pdlmil.baselines import (
    attention_drop_mask,
    attention_dropout,
    drop_instance,
    drop_instance_indices,
    spatial_dropout,
    vanilla_dropout,
)
from pdlmil.data import Bag
from pdlmil.numerics import Rng
from pdlmil.pdl import apba


def three_sigma(p, n):
    return 3 * math.sqrt(p * (1 - p) / n)


def test_vanilla_identity(rng):
    x = rng.normal((4, 6))
    assert np.array_equal(vanilla_dropout(x, 0.0, rng), x)


def test_vanilla_drop_fraction(rng):
    x = np.ones((100, 100))
    zeros = sum(int((vanilla_dropout(x, 0.3, rng.fork(i)) == 0).sum()) for i in range(10))
    assert abs(zeros / 100_000 - 0.3) <= 0.014


def test_vanilla_expectation():
    r = Rng(3)
    x = np.array([[1.0, -2.0, 0.5]])
    total = np.zeros_like(x)
    for i in range(50_000):
        total += vanilla_dropout(x, 0.3, r)
    assert np.allclose(total / 50_000, x, rtol=0.02)


def test_rates_out_of_range(rng):
    for fn in (vanilla_dropout, spatial_dropout):
        with pytest.raises(ValueError):
            fn(np.ones((2, 2)), 1.0, rng)


def test_spatial_identity(rng):
    x = rng.normal((4, 6))
    assert np.array_equal(spatial_dropout(x, 0.0, rng), x)


def test_spatial_drops_whole_columns(rng):
    x = np.ones((50, 8))
    freq = 0
    n = 20_000
    for i in range(n):
        out = spatial_dropout(x, 0.3, rng.fork(i))
        zero_cols = np.all(out == 0, axis=0)
        assert np.array_equal(zero_cols, np.any(out == 0, axis=0))
        assert np.allclose(out[:, ~zero_cols], 1 / 0.7)
        freq += zero_cols[0]
    assert abs(freq / n - 0.3) <= three_sigma(0.3, n)


def make_bag(K=10, D=3):
    return Bag("b", np.arange(K * D, dtype=float).reshape(K, D), 1, np.r_[1, np.zeros(K - 1)])


def test_drop_instance_identity(rng):
    bag = make_bag()
    out = drop_instance(bag, 0.0, rng)
    assert np.array_equal(out.instances, bag.instances)


def test_drop_instance_count(rng):
    out = drop_instance(make_bag(10), 0.3, rng)
    assert out.size == 7
    assert out.instance_labels.size == 7


def test_drop_instance_keeps_one(rng):
    for K in (1, 2, 3):
        for i in range(50):
            assert drop_instance(make_bag(K), 0.9, rng.fork((K, i))).size >= 1


def test_drop_instance_retention_frequency(rng):
    n = 20_000
    kept = np.zeros(10)
    for i in range(n):
        kept[drop_instance_indices(10, 0.3, rng.fork(i))] += 1
    assert np.all(np.abs(kept / n - 0.7) <= three_sigma(0.7, n))


def test_attention_dropout_uniform_falls_back_to_identity():
    x = np.ones((5, 4))
    assert np.array_equal(attention_dropout(x, 0.65), x)


def test_attention_dropout_dominant_instance():
    x = np.zeros((4, 2))
    x[2] = 3.0
    out = attention_dropout(x, 0.65)
    assert np.all(out[2] == 0)
    assert np.array_equal(np.delete(out, 2, axis=0), np.delete(x, 2, axis=0))


def test_attention_dropout_matches_filter(rng):
    x = rng.normal((20, 6)) * 0.5
    w = apba(x)
    expected = [k for k in range(20) if w[k] / w.max() > 0.65]
    mask = attention_drop_mask(x, 0.65).ravel()
    assert sorted(np.flatnonzero(mask == 0).tolist()) == expected
    assert len(expected) >= 1


def test_attention_dropout_validation():
    with pytest.raises(ValueError):
        attention_dropout(np.ones((3, 2)), 1.0)
    with pytest.raises(ValueError):
        attention_dropout(np.zeros((0, 2)), 0.5)
