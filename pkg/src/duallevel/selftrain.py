"""Desk-scale self-training loop with the instance bank and regeneration.

Each iteration draws one source and one target image. The target image is
augmented twice (weak and strong, pixel-aligned). The weak view produces
the semantic and instance pseudo-labels, which are regenerated against each
other. The strong view is trained towards them, and the source image gets
plain supervised cross-entropy. Every ``interval`` iterations the bank takes
an EMA step from embeddings selected on the current source image.

Randomness comes from independent named streams (``model``, ``order``,
``augment``, ``bank``), so switching the bank machinery on or off never
changes the data order or the augmentations.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from duallevel import losses
from duallevel.bank import InstanceBank, boundary_mask, ema_update, init_bank, select_embeddings
from duallevel.config import AugmentConfig, RunConfig
from duallevel.discrimination import unit_instance_probs
from duallevel.model import PixelModel, backward, featurize, forward_raw
from duallevel.numerics import Rng, make_rng
from duallevel.regen import regenerate
from duallevel.synthdata import Dataset, class_frequencies, gen_dataset


@dataclass
class AugmentationPair:
    weak: np.ndarray
    strong: np.ndarray


def _jitter(image, gain, offset):
    return np.clip(image * gain + offset, 0.0, 1.0)


def augment_pair(image, cfg: AugmentConfig, rng: Rng) -> AugmentationPair:
    """Photometric weak/strong views; no spatial transform, so pixels stay aligned.

    Draw order is fixed: weak gain, weak offset, strong gain, strong offset,
    blur sigma, noise.
    """
    img = np.asarray(image, dtype=np.float64)
    wg = 1.0 + rng.uniform(-cfg.weak_gain, cfg.weak_gain, 3)
    wo = rng.uniform(-cfg.weak_offset, cfg.weak_offset, 3)
    sg = 1.0 + rng.uniform(-cfg.strong_gain, cfg.strong_gain, 3)
    so = rng.uniform(-cfg.strong_offset, cfg.strong_offset, 3)
    sigma = rng.uniform(0.0, cfg.strong_blur)
    noise = rng.normal(0.0, 1.0, img.shape) * cfg.strong_noise
    weak = _jitter(img, wg, wo)
    strong = img
    if sigma > 0:
        strong = gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")
    strong = _jitter(strong, sg, so) + noise
    return AugmentationPair(weak, np.clip(strong, 0.0, 1.0))


# -- evaluation -----------------------------------------------------------------


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent from prediction and truth) and mIoU."""
    tp = np.diag(conf).astype(np.float64)
    fp = conf.sum(axis=0) - tp
    fn = conf.sum(axis=1) - tp
    den = tp + fp + fn
    iou = np.where(den > 0, tp / np.where(den > 0, den, 1), np.nan)
    valid = den > 0
    miou = float(iou[valid].mean()) if valid.any() else float("nan")
    return iou, miou


def confusion(pred, truth, C: int) -> np.ndarray:
    idx = np.asarray(truth).ravel() * C + np.asarray(pred).ravel()
    return np.bincount(idx, minlength=C * C).reshape(C, C)


class RawFeatureCache:
    """Frozen-featurizer outputs of a fixed image set, computed on first use."""

    def __init__(self, model: PixelModel, images: np.ndarray):
        self.model, self.images = model, images
        self._raw: dict[int, np.ndarray] = {}

    def __getitem__(self, j: int) -> np.ndarray:
        raw = self._raw.get(j)
        if raw is None:
            raw = self._raw[j] = featurize(self.model, self.images[j])
        return raw


def predict(model: PixelModel, image) -> np.ndarray:
    img = np.asarray(image)
    act = forward_raw(model, featurize(model, img))
    return np.argmax(act.probs, axis=1).reshape(img.shape[:2])


def evaluate_miou(model: PixelModel, dataset: Dataset, cache: RawFeatureCache | None = None) -> tuple[np.ndarray, float]:
    C = model.n_classes
    conf = np.zeros((C, C), dtype=np.int64)
    for j in range(len(dataset)):
        raw = cache[j] if cache is not None else featurize(model, dataset.images[j])
        pred = np.argmax(forward_raw(model, raw).probs, axis=1)
        conf += confusion(pred, dataset.labels[j], C)
    return iou_from_confusion(conf)


# -- one step -------------------------------------------------------------------


@dataclass
class StepLosses:
    src: float
    tgt: float
    ins: float
    overall: float


def semantic_step(model: PixelModel, src_raw, src_lab, views: AugmentationPair, cfg: RunConfig):
    """Forward/backward of the semantic-only objective. Returns grads, losses, source activations.

    ``src_raw`` is the featurized source image (``featurize(model, image)``).
    """
    tr = cfg.train
    act_s = forward_raw(model, src_raw)
    l_src = losses.source_loss(act_s.probs, src_lab)
    dW, dV = backward(model, act_s, losses.source_grad(act_s.probs, src_lab), None)

    act_w = forward_raw(model, featurize(model, views.weak))
    act_a = forward_raw(model, featurize(model, views.strong))
    z = act_w.probs
    l_tgt = losses.target_loss(act_a.probs, z, tr.tau, tr.soft_target)
    gW, gV = backward(model, act_a, losses.target_grad(act_a.probs, z, tr.tau, tr.soft_target), None)
    return dW + gW, dV + gV, l_src, l_tgt, act_s


def dual_step(model: PixelModel, bank: InstanceBank, src_raw, src_lab, views: AugmentationPair, cfg: RunConfig):
    """Forward/backward of the full objective. Returns ``(dW, dV, StepLosses, source activations)``."""
    tr = cfg.train
    act_s = forward_raw(model, src_raw)
    l_src = losses.source_loss(act_s.probs, src_lab)
    dW, dV = backward(model, act_s, losses.source_grad(act_s.probs, src_lab), None)

    # weak view: pseudo-labels only, no gradient
    act_w = forward_raw(model, featurize(model, views.weak))
    q_alpha = unit_instance_probs(act_w.e, bank.features, tr.tp)
    z = act_w.probs
    if tr.regenerate:
        out = regenerate(z[None], q_alpha[None], bank.labels, cfg.regen)
        z_hat, q_hat = out.z_hat[0], out.q_hat[0]
    else:
        z_hat, q_hat = z, q_alpha
    gate = z if tr.gate_on == "z" else None

    act_a = forward_raw(model, featurize(model, views.strong))
    q_strong = unit_instance_probs(act_a.e, bank.features, tr.tp)

    l_tgt = losses.target_loss(act_a.probs, z_hat, tr.tau, tr.soft_target, gate)
    d_logits = losses.target_grad(act_a.probs, z_hat, tr.tau, tr.soft_target, gate)
    l_ins = _instance_ce(q_strong, q_hat, tr.ins_reduction)
    d_embed = None
    if tr.lambda_ins != 0.0:
        d_scores = losses.instance_grad(q_strong, q_hat, tr.tp, tr.ins_reduction)
        d_embed = tr.lambda_ins * (d_scores @ bank.features)
    gW, gV = backward(model, act_a, d_logits, d_embed)
    overall = losses.overall_loss(l_src, l_tgt, l_ins, tr.lambda_ins)
    return dW + gW, dV + gV, StepLosses(l_src, l_tgt, l_ins, overall), act_s


def _instance_ce(q_strong, q_target, reduction):
    total = max(float(-np.sum(q_target * np.log(np.maximum(q_strong, losses.LOG_FLOOR)))), 0.0)
    return total / len(q_strong) if reduction == "mean" else total


# -- the loop -------------------------------------------------------------------


class CyclicSampler:
    """Cycles through ``n`` indices, reshuffling at every epoch."""

    def __init__(self, n: int, rng: Rng):
        if n < 1:
            raise ValueError("cannot sample from an empty dataset")
        self.n, self.rng = n, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> int:
        if self.pos == self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        j = int(self.order[self.pos])
        self.pos += 1
        return j


def seed_bank(model: PixelModel, source: Dataset, cfg: RunConfig, rng: Rng) -> InstanceBank:
    """Offline bank fill with randomly chosen source pixel embeddings."""
    C = cfg.n_classes
    freq = class_frequencies(source.labels, C) + 1e-9
    n_img = min(cfg.train.bank_seed_images, len(source))
    picks = rng.choice(len(source), size=n_img, replace=False)
    feats, labs = [], []
    for j in picks:
        act = forward_raw(model, featurize(model, source.images[j]))
        feats.append(act.e)
        labs.append(source.labels[j].ravel())
    feats, labs = np.concatenate(feats), np.concatenate(labs)
    sampling = cfg.bank.policy.sampling
    from duallevel.bank import slot_layout

    counts = slot_layout(cfg.bank.K, C, sampling, freq)
    pool = []
    for c in range(C):
        idx = np.flatnonzero(labs == c)
        if len(idx) == 0:
            continue
        chosen = rng.choice(idx, size=counts[c], replace=len(idx) < counts[c])
        pool.extend((feats[i], c) for i in chosen)
    return init_bank(cfg.bank.K, C, model.embed_dim, rng, pool, sampling, freq)


@dataclass
class TrainResult:
    model: PixelModel
    bank: InstanceBank | None
    metrics: list[dict] = field(default_factory=list)
    history: dict[str, list[float]] = field(default_factory=dict)


METRIC_COLUMNS = ("iter", "L_src", "L_tgt", "L_ins", "L_overall", "miou_target")


def build_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    source, target, _ = gen_dataset(d.source, d.target, d.n_source, d.n_target, d.seed, d.height, d.width)
    return source, target


def create_model(cfg: RunConfig) -> PixelModel:
    m = cfg.model
    return PixelModel.create(make_rng(cfg.train.seed, "model"), cfg.n_classes, m.patch, m.raw_dim, m.embed_dim,
                             m.proj_scale, m.init_scale)


def train(cfg: RunConfig, source: Dataset, target: Dataset, eval_set: Dataset | None = None,
          semantic_only: bool = False, on_eval=None) -> TrainResult:
    """Run ``cfg.train.iterations`` gradient steps; deterministic given the seeds.

    ``eval_set`` defaults to the labeled target set. ``semantic_only``
    drops the bank entirely (the plain self-training baseline).
    ``on_eval(iteration, model, bank)`` is called at every evaluation point.
    """
    tr = cfg.train
    eval_set = target if eval_set is None else eval_set
    model = create_model(cfg)
    src_order = CyclicSampler(len(source), make_rng(tr.seed, "order", "source"))
    tgt_order = CyclicSampler(len(target), make_rng(tr.seed, "order", "target"))
    aug_rng = make_rng(tr.seed, "augment")
    bank_rng = make_rng(tr.seed, "bank")
    bank = None if semantic_only else seed_bank(model, source, cfg, bank_rng)
    policy = cfg.bank.policy

    src_raw = RawFeatureCache(model, source.images)
    eval_raw = RawFeatureCache(model, eval_set.images)

    result = TrainResult(model, bank, history={k: [] for k in ("L_src", "L_tgt", "L_ins", "L_overall")})
    _record(result, 0, model, eval_set, eval_raw, window=None)
    if on_eval:
        on_eval(0, model, bank)
    window = []
    for it in range(tr.iterations):
        js, jt = src_order.next(), tgt_order.next()
        src_lab = source.labels[js]
        views = augment_pair(target.images[jt], cfg.augment, aug_rng)
        if bank is None:
            dW, dV, l_src, l_tgt, act_s = semantic_step(model, src_raw[js], src_lab, views, cfg)
            step = StepLosses(l_src, l_tgt, 0.0, l_src + l_tgt)
        else:
            dW, dV, step, act_s = dual_step(model, bank, src_raw[js], src_lab, views, cfg)
        model.W -= tr.lr * dW
        model.V -= tr.lr * dV
        if bank is not None and (it + 1) % policy.interval == 0:
            h, w = src_lab.shape
            feats = act_s.e.reshape(h, w, -1)
            mask = boundary_mask(src_lab, policy.sigma) if policy.selecting == "BPS" else None
            selected = select_embeddings(feats, src_lab, mask, bank_rng, policy)
            bank = ema_update(bank, selected, policy)
            result.bank = bank
        for k, v in (("L_src", step.src), ("L_tgt", step.tgt), ("L_ins", step.ins), ("L_overall", step.overall)):
            result.history[k].append(v)
        window.append(step)
        if (it + 1) % tr.eval_every == 0 or it + 1 == tr.iterations:
            _record(result, it + 1, model, eval_set, eval_raw, window)
            window = []
            if on_eval:
                on_eval(it + 1, model, bank)
    return result


def _record(result: TrainResult, it: int, model: PixelModel, eval_set: Dataset, cache, window):
    iou, miou = evaluate_miou(model, eval_set, cache)
    row = {"iter": it}
    if window:
        row["L_src"] = float(np.mean([s.src for s in window]))
        row["L_tgt"] = float(np.mean([s.tgt for s in window]))
        row["L_ins"] = float(np.mean([s.ins for s in window]))
        row["L_overall"] = float(np.mean([s.overall for s in window]))
    else:
        row.update(L_src=math.nan, L_tgt=math.nan, L_ins=math.nan, L_overall=math.nan)
    row["miou_target"] = miou
    for c, v in enumerate(iou):
        row[f"iou_class_{c}"] = float(v)
    result.metrics.append(row)


def metrics_csv(metrics: list[dict], n_classes: int) -> str:
    cols = list(METRIC_COLUMNS) + [f"iou_class_{c}" for c in range(n_classes)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in metrics:
        writer.writerow([_fmt(row[c]) for c in cols])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))
