"""Semantic and instance losses, each paired with its logit-space gradient.

All losses are means over pixels. Gradients are returned with respect to
the pre-softmax scores, already divided by the pixel count. Pseudo-labels
are constants: no gradient flows into them.
"""
from __future__ import annotations

import numpy as np

LOG_FLOOR = 1e-12


def _flat(x, last):
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(-1, x.shape[-1]) if last else x.reshape(-1)


def source_loss(probs, labels) -> float:
    p = _flat(probs, True)
    y = _flat(labels, False).astype(np.int64)
    picked = p[np.arange(len(y)), y]
    return float(-np.mean(np.log(np.maximum(picked, LOG_FLOOR))))


def source_grad(probs, labels) -> np.ndarray:
    p = _flat(probs, True)
    y = _flat(labels, False).astype(np.int64)
    g = p.copy()
    g[np.arange(len(y)), y] -= 1.0
    return g / len(y)


def target_pseudo(probs_weak) -> tuple[np.ndarray, np.ndarray]:
    """Hard pseudo-labels (argmax, lowest index wins ties) and confidences."""
    p = np.asarray(probs_weak, dtype=np.float64)
    return np.argmax(p, axis=-1), np.max(p, axis=-1)


def _gate(z_hat, tau):
    z = _flat(z_hat, True)
    hard = np.argmax(z, axis=1)
    keep = z[np.arange(len(z)), hard] > tau
    return z, hard, keep


def target_loss(probs_strong, z_hat_map, tau: float, soft: bool = False, gate_map=None) -> float:
    """Confidence-gated cross-entropy on the strong view.

    A pixel contributes only if the max of its pseudo-label exceeds ``tau``
    (the max of ``gate_map`` when given). Hard mode uses ``argmax z_hat`` as
    the target; soft mode uses the full ``z_hat`` distribution.
    """
    p = _flat(probs_strong, True)
    z, hard, keep = _gate(z_hat_map, tau)
    if gate_map is not None:
        _, _, keep = _gate(gate_map, tau)
    logp = np.log(np.maximum(p, LOG_FLOOR))
    if soft:
        per = -np.sum(z * logp, axis=1)
    else:
        per = -logp[np.arange(len(p)), hard]
    return float(np.sum(np.where(keep, per, 0.0)) / len(p))


def target_grad(probs_strong, z_hat_map, tau: float, soft: bool = False, gate_map=None) -> np.ndarray:
    p = _flat(probs_strong, True)
    z, hard, keep = _gate(z_hat_map, tau)
    if gate_map is not None:
        _, _, keep = _gate(gate_map, tau)
    if soft:
        g = p - z
    else:
        g = p.copy()
        g[np.arange(len(p)), hard] -= 1.0
    g[~keep] = 0.0
    return g / len(p)


def instance_grad(q_strong, q_target, tp: float, reduction: str = "mean") -> np.ndarray:
    """Gradient of the instance CE with respect to the cosine scores (before /tp)."""
    q = _flat(q_strong, True)
    t = _flat(q_target, True)
    g = (q * t.sum(axis=1, keepdims=True) - t) / tp
    return g / len(q) if reduction == "mean" else g


def overall_loss(l_src: float, l_tgt: float, l_ins: float, lambda_ins: float) -> float:
    return l_src + l_tgt + lambda_ins * l_ins
