"""Instance-level predictions against the bank and the instance consistency loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from duallevel.bank import InstanceBank
from duallevel.numerics import l2_normalize_rows, softmax_temp

LOG_FLOOR = 1e-12


@dataclass
class InstancePredictionMap:
    grid: np.ndarray  # (H, W, K)
    bank_version: int = 0

    @property
    def K(self) -> int:
        return self.grid.shape[2]


def instance_logits(queries: np.ndarray, bank_features: np.ndarray, tp: float) -> tuple[np.ndarray, np.ndarray]:
    """Cosine scores over temperature for (N, D) queries.

    Returns ``(scores / tp, zero_rows)``; zero-norm queries get a score row
    of zeros so their softmax is uniform.
    """
    unit, norms = l2_normalize_rows(np.asarray(queries, dtype=np.float64))
    return (unit @ bank_features.T) / tp, norms == 0.0


def unit_instance_probs(units: np.ndarray, bank_features: np.ndarray, tp: float) -> np.ndarray:
    """Softmax of cosine scores for rows that are already unit (or zero) vectors.

    The training hot path: one (N, K) buffer updated in place, no input checks.
    """
    s = units @ bank_features.T
    s -= s.max(axis=1, keepdims=True)
    s *= 1.0 / tp
    np.exp(s, out=s)
    s /= s.sum(axis=1, keepdims=True)
    return s


def instance_predict(features, bank: InstanceBank, tp: float) -> InstancePredictionMap:
    """Softmax over cosine similarity between every pixel and every bank row."""
    feats = np.asarray(features, dtype=np.float64)
    h, w, d = feats.shape
    if d != bank.D:
        raise ValueError(f"feature dim {d} does not match bank dim {bank.D}")
    scores, _ = instance_logits(feats.reshape(-1, d), bank.features, 1.0)
    probs = softmax_temp(scores, tp)
    return InstancePredictionMap(probs.reshape(h, w, bank.K), bank.updates_applied)


def instance_loss(pred_strong: InstancePredictionMap, pseudo: InstancePredictionMap, reduction: str = "mean") -> float:
    """Cross-entropy of the strong-view prediction against the pseudo target.

    ``reduction="mean"`` divides the pixel sum by the pixel count; ``"sum"``
    returns the raw pixel sum.
    """
    p = pred_strong.grid if isinstance(pred_strong, InstancePredictionMap) else np.asarray(pred_strong)
    t = pseudo.grid if isinstance(pseudo, InstancePredictionMap) else np.asarray(pseudo)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: prediction {p.shape} vs pseudo-label {t.shape}")
    total = float(-np.sum(t * np.log(np.maximum(p, LOG_FLOOR))))
    total = max(total, 0.0)
    if reduction == "sum":
        return total
    if reduction == "mean":
        return total / (p.shape[0] * p.shape[1])
    raise ValueError(f"unknown reduction {reduction!r}")
