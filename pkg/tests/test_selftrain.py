import math

import numpy as np
import pytest

from duallevel import losses
from duallevel.config import RunConfig
from duallevel.model import PixelModel, forward, load_checkpoint, save_checkpoint
from duallevel.numerics import make_rng
from duallevel.selftrain import (
    CyclicSampler,
    augment_pair,
    build_datasets,
    confusion,
    iou_from_confusion,
    metrics_csv,
    train,
)
from duallevel.synthdata import gen_dataset

from oracles import reference_semantic_loop


# -- losses -------------------------------------------------------------------------


def test_source_loss_examples():
    onehot = np.eye(3)[[0, 1, 2, 1]]
    assert losses.source_loss(onehot, [0, 1, 2, 1]) == 0.0
    assert losses.source_loss(np.full((4, 3), 1 / 3), [0, 1, 2, 1]) == pytest.approx(math.log(3), abs=1e-15)
    eps = 1e-4
    p = onehot.copy()
    p[0] = [eps, 1 - eps, 0]
    assert losses.source_loss(p, [0, 1, 2, 1]) == pytest.approx(-math.log(eps) / 4, rel=1e-14)


def test_target_pseudo_tie_break_and_naive_scan():
    hard, conf = losses.target_pseudo(np.array([[0.5, 0.5], [0.0, 1.0]]))
    assert hard.tolist() == [0, 1] and conf.tolist() == [0.5, 1.0]
    p = make_rng(0).dirichlet(np.ones(6), 50)
    hard, _ = losses.target_pseudo(p)
    for row, h in zip(p, hard):
        best = 0
        for c in range(6):
            if row[c] > row[best]:
                best = c
        assert h == best


def test_target_loss_two_pixel_hand_case():
    strong = np.array([[0.8, 0.2], [0.3, 0.7]])
    z_hat = np.array([[0.99, 0.01], [0.6, 0.4]])
    # only pixel 0 clears tau; its target is class 0: -log(0.8) / 2
    assert losses.target_loss(strong, z_hat, 0.968) == pytest.approx(-math.log(0.8) / 2, rel=1e-14)


def test_target_loss_fully_gated_and_zero():
    p = make_rng(1).dirichlet(np.ones(3), 10)
    z = np.full((10, 3), 1 / 3)
    assert losses.target_loss(p, z, 0.968) == 0.0
    assert np.all(losses.target_grad(p, z, 0.968) == 0.0)
    onehot = np.eye(3)[[0, 2, 1]]
    assert losses.target_loss(onehot, onehot, 0.0) == 0.0


def test_gated_pixels_contribute_nothing():
    rng = make_rng(2)
    p = rng.dirichlet(np.ones(3), 20)
    z = rng.dirichlet(np.ones(3) * 0.2, 20)
    keep = z.max(axis=1) > 0.9
    assert 0 < keep.sum() < 20
    full = losses.target_loss(p, z, 0.9) * 20
    kept_only = losses.target_loss(p[keep], z[keep], 0.9) * keep.sum()
    assert full == pytest.approx(kept_only, rel=1e-14)
    assert np.all(losses.target_grad(p, z, 0.9)[~keep] == 0.0)


def test_overall_loss():
    assert losses.overall_loss(1, 2, 3, 1.0) == 6
    assert losses.overall_loss(1, 2, 3, 0.0) == 3
    assert losses.overall_loss(0, 0, 0, 1.0) == 0


# -- evaluation ---------------------------------------------------------------------


def test_iou_perfect_and_disjoint():
    y = np.array([0, 0, 1, 1])
    assert iou_from_confusion(confusion(y, y, 2))[1] == 1.0
    assert iou_from_confusion(confusion(1 - y, y, 2))[1] == 0.0


def test_iou_half_overlap_stripes():
    truth = np.zeros((4, 4), dtype=int)
    truth[:, 2:] = 1
    pred = np.zeros((4, 4), dtype=int)
    pred[:, 1:] = 1
    # class 0: TP 4, FN 4 -> 1/2; class 1: TP 8, FP 4 -> 2/3
    iou, miou = iou_from_confusion(confusion(pred, truth, 2))
    np.testing.assert_allclose(iou, [0.5, 2 / 3])
    # half-overlap: prediction is the truth stripe shifted by its own half-width
    pred2 = np.zeros((4, 4), dtype=int)
    pred2[:, 1:3] = 1
    truth2 = np.zeros((4, 4), dtype=int)
    truth2[:, 2:] = 1
    iou2, _ = iou_from_confusion(confusion(pred2, truth2, 2))
    assert iou2[1] == pytest.approx(1 / 3)


def test_iou_excludes_absent_classes():
    y = np.array([0, 0, 2])
    iou, miou = iou_from_confusion(confusion(y, y, 3))
    assert math.isnan(iou[1]) and miou == 1.0


# -- model ----------------------------------------------------------------------------


def test_zero_weights_give_uniform_probs():
    model = PixelModel.create(make_rng(0), 4, raw_dim=6, embed_dim=3)
    model.W[:] = 0.0
    feats, probs = forward(model, make_rng(1).random((5, 5, 3)))
    assert np.all(feats == 0.0)
    np.testing.assert_allclose(probs, 0.25)


def test_constant_image_gives_identical_pixels():
    model = PixelModel.create(make_rng(0), 3)
    feats, probs = forward(model, np.full((8, 8, 3), 0.4))
    np.testing.assert_array_equal(feats, np.broadcast_to(feats[0, 0], feats.shape))
    np.testing.assert_allclose(np.linalg.norm(feats, axis=2), 1.0, atol=1e-12)
    np.testing.assert_allclose(probs.sum(axis=2), 1.0, atol=1e-12)


def test_checkpoint_round_trip():
    model = PixelModel.create(make_rng(3), 3, raw_dim=5, embed_dim=4)
    back, bank_bytes = load_checkpoint(save_checkpoint(model, b"bank!"))
    assert bank_bytes == b"bank!"
    for name in ("P", "b", "W", "V"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    with pytest.raises(ValueError):
        load_checkpoint(save_checkpoint(model, b"")[:-9])


# -- loop pieces -------------------------------------------------------------------------


def test_cyclic_sampler_visits_everything_each_epoch():
    s = CyclicSampler(7, make_rng(0))
    for _ in range(3):
        assert sorted(s.next() for _ in range(7)) == list(range(7))


def test_augmentations_are_aligned():
    img = make_rng(0).random((10, 12, 3))
    views = augment_pair(img, RunConfig().augment, make_rng(1))
    assert views.weak.shape == views.strong.shape == img.shape
    assert views.weak.min() >= 0 and views.strong.max() <= 1
    # weak view is a per-channel affine map of the original (before clipping)
    assert np.abs(views.weak - img).max() < 0.1


def _small_cfg(**over):
    base = {"data.n_source": 6, "data.n_target": 6, "data.height": 16, "data.width": 16,
            "train.iterations": 30, "train.eval_every": 10}
    base.update(over)
    return RunConfig().replace(**base)


def test_zero_iterations_has_only_initial_eval():
    cfg = _small_cfg(**{"train.iterations": 0})
    src, tgt = build_datasets(cfg)
    res = train(cfg, src, tgt)
    assert [m["iter"] for m in res.metrics] == [0]
    assert math.isnan(res.metrics[0]["L_src"])


def test_train_is_deterministic_and_csv_stable():
    cfg = _small_cfg()
    src, tgt = build_datasets(cfg)
    a = train(cfg, src, tgt)
    b = train(cfg, src, tgt)
    assert metrics_csv(a.metrics, 5) == metrics_csv(b.metrics, 5)
    assert [m["iter"] for m in a.metrics] == [0, 10, 20, 30]
    header = metrics_csv(a.metrics, 5).splitlines()[0]
    assert header == "iter,L_src,L_tgt,L_ins,L_overall,miou_target," + ",".join(f"iou_class_{c}" for c in range(5))
    np.testing.assert_allclose(np.linalg.norm(a.bank.features, axis=1), 1.0, atol=1e-9)


def test_disabled_mechanism_matches_reference_loop():
    cfg = _small_cfg(**{"train.iterations": 40, "train.lambda_ins": 0.0, "regen.phi": 1.0,
                        "bank.policy.sampling": "NU"})
    src, tgt = build_datasets(cfg)
    res = train(cfg, src, tgt)
    ref_model, l_src, l_tgt = reference_semantic_loop(cfg, src, tgt)
    assert res.model.W.tobytes() == ref_model.W.tobytes()
    assert res.model.V.tobytes() == ref_model.V.tobytes()
    assert res.history["L_src"] == l_src
    assert res.history["L_tgt"] == l_tgt


def test_semantic_only_matches_disabled_mechanism():
    cfg = _small_cfg(**{"train.lambda_ins": 0.0, "regen.phi": 1.0, "bank.policy.sampling": "NU"})
    src, tgt = build_datasets(cfg)
    a = train(cfg, src, tgt)
    b = train(cfg, src, tgt, semantic_only=True)
    assert a.model.W.tobytes() == b.model.W.tobytes()
    assert a.history["L_tgt"] == b.history["L_tgt"]


@pytest.mark.slow
def test_zero_gap_baseline_sanity_floor():
    cfg = RunConfig()
    cfg = cfg.replace(**{"data.target": cfg.to_dict()["data"]["source"], "data.n_source": 200, "data.n_target": 200,
                         "train.iterations": 2000, "train.eval_every": 2000})
    src, tgt = build_datasets(cfg)
    res = train(cfg, src, tgt, semantic_only=True)
    assert res.metrics[-1]["miou_target"] >= 0.9
