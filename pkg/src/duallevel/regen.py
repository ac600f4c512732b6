"""Pseudo-label regeneration between the semantic and instance levels.

Semantic vectors live on the C-simplex, instance vectors on the K-simplex.
The bank's label array maps instance slots onto classes: ``scatter`` copies
class mass onto slots, ``gather`` sums slot mass back onto classes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from duallevel import kernels

MODES = ("smoothing", "scaling")
_DEGENERATE = 1e-12


@dataclass
class InteractionStrategy:
    """How each level's pseudo-label is rebuilt.

    ``z_mode`` applies to the semantic label, ``q_mode`` to the instance
    label. ``q_mode="smoothing"`` has no canonical formula; this package
    uses ``phi * q + (1 - phi) * z_sc / sum(z_sc)``.
    """

    z_mode: str = "smoothing"
    q_mode: str = "scaling"
    phi: float = 0.9

    def __post_init__(self):
        if self.z_mode not in MODES or self.q_mode not in MODES:
            raise ValueError(f"modes must be one of {MODES}")
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")


@dataclass
class RegenOutput:
    z_hat: np.ndarray  # (H, W, C)
    q_hat: np.ndarray  # (H, W, K)
    flags: np.ndarray  # (H, W) uint8; bit 0 instance fallback, bit 1 semantic fallback
    z_sc: np.ndarray  # (H, W, K)
    q_ga: np.ndarray  # (H, W, C)

    @property
    def scale_fallback(self) -> np.ndarray:
        return (self.flags & (kernels.FLAG_Q_FALLBACK | kernels.FLAG_Z_FALLBACK)) != 0


def scatter(z, bank_labels) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z[..., np.asarray(bank_labels, dtype=np.int64)]


def scale(q_alpha, z_sc) -> tuple[np.ndarray, bool]:
    """Elementwise product, renormalized. Returns ``(q_hat, fell_back)``."""
    q = np.asarray(q_alpha, dtype=np.float64)
    num = q * np.asarray(z_sc, dtype=np.float64)
    den = num.sum()
    if den < _DEGENERATE:
        return q.copy(), True
    return num / den, False


def gather(q_alpha, bank_labels, n_classes: int) -> np.ndarray:
    q = np.asarray(q_alpha, dtype=np.float64)
    labels = np.asarray(bank_labels, dtype=np.int64)
    out = np.zeros(n_classes)
    for k in range(len(labels)):
        out[labels[k]] += q[k]
    return out


def smooth(z, q_ga, phi: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    g = np.asarray(q_ga, dtype=np.float64)
    out = phi * z + (1.0 - phi) * g
    return np.clip(out, np.minimum(z, g), np.maximum(z, g))


def regenerate(z_map, q_alpha_map, bank_labels, strategy: InteractionStrategy | None = None) -> RegenOutput:
    """Rebuild both pseudo-labels from snapshots of the weak-view predictions.

    Both outputs read only the inputs, never each other, so the order of the
    two updates cannot matter.
    """
    strategy = strategy or InteractionStrategy()
    z = np.asarray(z_map, dtype=np.float64)
    q = np.asarray(q_alpha_map, dtype=np.float64)
    labels = np.asarray(bank_labels, dtype=np.int64)
    if z.ndim != 3 or q.ndim != 3 or z.shape[:2] != q.shape[:2]:
        raise ValueError(f"shape mismatch: semantic {z.shape} vs instance {q.shape}")
    if q.shape[2] != labels.shape[0]:
        raise ValueError(f"instance map has {q.shape[2]} slots but bank has {labels.shape[0]}")
    h, w, C = z.shape
    K = q.shape[2]
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError("bank labels outside the class range")
    z_sc, q_ga, z_hat, q_hat, flags = kernels.regenerate(
        z.reshape(-1, C),
        q.reshape(-1, K),
        labels,
        C,
        float(strategy.phi),
        MODES.index(strategy.z_mode),
        MODES.index(strategy.q_mode),
    )
    return RegenOutput(
        z_hat=z_hat.reshape(h, w, C),
        q_hat=q_hat.reshape(h, w, K),
        flags=flags.reshape(h, w),
        z_sc=z_sc.reshape(h, w, K),
        q_ga=q_ga.reshape(h, w, C),
    )
