"""Analytic gradients against central differences on a tiny instance.

Pseudo-targets are computed once and then held fixed, matching the
training step where no gradient flows into them.
"""
import numpy as np
import pytest

from duallevel import losses
from duallevel.bank import init_bank
from duallevel.discrimination import InstancePredictionMap, instance_loss, unit_instance_probs
from duallevel.model import PixelModel, backward, featurize, forward_raw
from duallevel.numerics import make_rng

from oracles import central_diff, max_rel_error

TP = 0.1
TAU = 0.6


@pytest.fixture
def tiny():
    rng = make_rng(123)
    model = PixelModel.create(rng, n_classes=3, patch=3, raw_dim=8, embed_dim=6, init_scale=2.0)
    src = rng.random((4, 4, 3))
    lab = rng.integers(0, 3, (4, 4))
    strong = rng.random((4, 4, 3))
    weak = np.clip(strong + rng.normal(0, 0.05, strong.shape), 0, 1)
    bank = init_bank(6, 3, 6, rng)
    act_w = forward_raw(model, featurize(model, weak))
    z_hat = act_w.probs.copy()
    q_hat = unit_instance_probs(act_w.e, bank.features, TP)
    return model, src, lab, strong, bank, z_hat, q_hat


def _losses(model, src, lab, strong, bank, z_hat, q_hat, lam=1.0):
    act_s = forward_raw(model, featurize(model, src))
    act_a = forward_raw(model, featurize(model, strong))
    q = unit_instance_probs(act_a.e, bank.features, TP)
    l_src = losses.source_loss(act_s.probs, lab)
    l_tgt = losses.target_loss(act_a.probs, z_hat, TAU)
    l_ins = instance_loss(InstancePredictionMap(q.reshape(4, 4, -1)), InstancePredictionMap(q_hat.reshape(4, 4, -1)))
    return {"src": l_src, "tgt": l_tgt, "ins": l_ins, "overall": losses.overall_loss(l_src, l_tgt, l_ins, lam)}


def _analytic(model, src, lab, strong, bank, z_hat, q_hat, which, lam=1.0):
    act_s = forward_raw(model, featurize(model, src))
    act_a = forward_raw(model, featurize(model, strong))
    q = unit_instance_probs(act_a.e, bank.features, TP)
    dW = np.zeros_like(model.W)
    dV = np.zeros_like(model.V)
    if which in ("src", "overall"):
        gW, gV = backward(model, act_s, losses.source_grad(act_s.probs, lab), None)
        dW, dV = dW + gW, dV + gV
    d_logits = losses.target_grad(act_a.probs, z_hat, TAU) if which in ("tgt", "overall") else None
    d_embed = None
    if which in ("ins", "overall"):
        d_embed = (lam if which == "overall" else 1.0) * (losses.instance_grad(q, q_hat, TP) @ bank.features)
    if d_logits is not None or d_embed is not None:
        gW, gV = backward(model, act_a, d_logits, d_embed)
        dW, dV = dW + gW, dV + gV
    return dW, dV


def test_tiny_instance_gates_some_pixels(tiny):
    z_hat = tiny[5]
    kept = (z_hat.max(axis=1) > TAU).sum()
    assert 0 < kept < 16


@pytest.mark.parametrize("which", ["src", "tgt", "ins", "overall"])
def test_gradients_match_finite_differences(tiny, which):
    model, *rest = tiny
    aW, aV = _analytic(model, *rest, which)
    nW = central_diff(lambda: _losses(model, *rest)[which], model.W)
    nV = central_diff(lambda: _losses(model, *rest)[which], model.V)
    assert max_rel_error(aW, nW) <= 1e-4
    assert max_rel_error(aV, nV) <= 1e-4
    assert np.abs(aW).max() > 1e-4


def test_overall_weights_instance_term(tiny):
    model, *rest = tiny
    aW, _ = _analytic(model, *rest, "overall", lam=0.25)
    nW = central_diff(lambda: _losses(model, *rest, lam=0.25)["overall"], model.W)
    assert max_rel_error(aW, nW) <= 1e-4


def test_soft_target_gradient(tiny):
    model, src, lab, strong, bank, z_hat, q_hat = tiny

    def f():
        act = forward_raw(model, featurize(model, strong))
        return losses.target_loss(act.probs, z_hat, TAU, soft=True)

    act = forward_raw(model, featurize(model, strong))
    aW, aV = backward(model, act, losses.target_grad(act.probs, z_hat, TAU, soft=True), None)
    assert max_rel_error(aW, central_diff(f, model.W)) <= 1e-4
    assert max_rel_error(aV, central_diff(f, model.V)) <= 1e-4


def test_sum_reduction_gradient_scales_with_pixels(tiny):
    model, src, lab, strong, bank, z_hat, q_hat = tiny
    q = unit_instance_probs(forward_raw(model, featurize(model, strong)).e, bank.features, TP)
    np.testing.assert_allclose(losses.instance_grad(q, q_hat, TP, "sum"), 16 * losses.instance_grad(q, q_hat, TP, "mean"))


def test_zero_embedding_has_zero_gradient():
    model = PixelModel.create(make_rng(0), 2, raw_dim=4, embed_dim=3)
    model.W[:] = 0.0
    act = forward_raw(model, featurize(model, np.full((2, 2, 3), 0.5)))
    dW, dV = backward(model, act, np.ones((4, 2)), np.ones((4, 3)))
    assert np.all(dW == 0.0)
