import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from duallevel.bank import InstanceBank, init_bank
from duallevel.discrimination import InstancePredictionMap, instance_loss, instance_predict
from duallevel.numerics import make_rng


def _bank(rows, labels=None, C=None):
    rows = np.asarray(rows, dtype=np.float64)
    labels = np.arange(len(rows)) if labels is None else np.asarray(labels)
    return InstanceBank(rows, labels, C or int(labels.max()) + 1)


def test_nearest_neighbour_limit():
    bank = _bank(np.eye(4))
    feats = np.array([[[0.0, 0.0, 2.0, 0.0]]])
    pred = instance_predict(feats, bank, 1e-4)
    assert np.argmax(pred.grid[0, 0]) == 2


def test_identical_rows_give_uniform():
    bank = _bank(np.tile([[0.6, 0.8]], (5, 1)), labels=[0] * 5, C=1)
    pred = instance_predict(make_rng(0).normal(size=(3, 2, 2)), bank, 0.1)
    np.testing.assert_allclose(pred.grid, 0.2, atol=1e-15)


def test_two_slot_closed_form():
    bank = _bank(np.eye(2))
    pred = instance_predict(np.array([[[1.0, 0.0]]]), bank, 0.1)
    e10 = math.exp(10.0)
    np.testing.assert_allclose(pred.grid[0, 0], [e10 / (e10 + 1), 1 / (e10 + 1)], rtol=1e-14)


def test_zero_query_is_uniform():
    bank = init_bank(6, 2, 3, make_rng(0))
    pred = instance_predict(np.zeros((1, 1, 3)), bank, 0.1)
    np.testing.assert_allclose(pred.grid[0, 0], 1 / 6, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**5), st.floats(0.01, 100.0))
def test_scale_invariance_and_simplex(seed, scale):
    rng = make_rng(seed)
    bank = init_bank(8, 2, 5, rng)
    feats = rng.normal(size=(3, 3, 5))
    a = instance_predict(feats, bank, 0.1).grid
    b = instance_predict(feats * scale, bank, 0.1).grid
    np.testing.assert_allclose(a, b, atol=1e-12)
    np.testing.assert_allclose(a.sum(axis=2), 1.0, atol=1e-9)
    assert np.all(a >= 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**5))
def test_high_temperature_is_uniform(seed):
    rng = make_rng(seed)
    bank = init_bank(10, 2, 4, rng)
    pred = instance_predict(rng.normal(size=(2, 2, 4)), bank, 1e6).grid
    assert np.max(np.abs(pred - 0.1)) < 1e-4


def test_dim_mismatch():
    with pytest.raises(ValueError):
        instance_predict(np.zeros((1, 1, 3)), init_bank(4, 2, 5, make_rng(0)), 0.1)


def _map(v):
    return InstancePredictionMap(np.asarray(v, dtype=np.float64))


def test_loss_examples():
    onehot = _map([[[0.0, 1.0, 0.0]]])
    assert instance_loss(onehot, onehot) == 0.0
    uni = _map([[[0.25] * 4]])
    assert instance_loss(uni, uni) == pytest.approx(math.log(4), abs=1e-15)
    eps = 1e-3
    pred = _map([[[1 - eps, eps]], [[1 - eps, eps]]])
    target = _map([[[0.0, 1.0]], [[0.0, 1.0]]])
    assert instance_loss(pred, target, "sum") == pytest.approx(-2 * math.log(eps), rel=1e-14)
    assert instance_loss(pred, target, "mean") == pytest.approx(-math.log(eps), rel=1e-14)


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        instance_loss(_map(np.ones((1, 1, 3)) / 3), _map(np.ones((1, 2, 3)) / 3))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10**5))
def test_loss_nonnegative_and_zero_iff_match(seed):
    rng = make_rng(seed)
    p = rng.dirichlet(np.ones(5), size=(2, 3))
    k = rng.integers(0, 5, (2, 3))
    t = np.eye(5)[k]
    assert instance_loss(_map(p), _map(t)) >= 0
    assert instance_loss(_map(t), _map(t)) == 0.0
    assert instance_loss(_map(p), _map(t)) > 0
