"""Labeled instance bank: slot layouts, boundary masks, selection, EMA updates.

The bank keeps ``K`` unit-norm source embeddings (``features``) with fixed
class labels. Slots of one class are contiguous, so the layout is a list of
``(start, stop)`` ranges indexed by class.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from duallevel import kernels
from duallevel.numerics import Rng, kmeans, l2_normalize, l2_normalize_rows

SAMPLING = ("NU", "RS", "ILS", "CBS")
SELECTING = ("RS", "AVG", "KM", "BPS")
SLOT_MODES = ("round_robin", "broadcast")

MAGIC = b"IBNK"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class BankUpdatePolicy:
    sampling: str = "CBS"
    selecting: str = "BPS"
    interval: int = 50
    momentum: float = 0.999
    slot_mode: str = "round_robin"
    sigma: int = 1
    kmeans_k: int = 1

    def __post_init__(self):
        if self.sampling not in SAMPLING:
            raise ValueError(f"unknown sampling {self.sampling!r}")
        if self.selecting not in SELECTING:
            raise ValueError(f"unknown selecting {self.selecting!r}")
        if self.slot_mode not in SLOT_MODES:
            raise ValueError(f"unknown slot_mode {self.slot_mode!r}")
        if self.interval < 1:
            raise ValueError("update interval must be >= 1")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        if self.kmeans_k < 1:
            raise ValueError("kmeans_k must be >= 1")


@dataclass
class InstanceBank:
    features: np.ndarray  # (K, D)
    labels: np.ndarray  # (K,) int64
    n_classes: int
    cursors: np.ndarray = field(default=None)  # (C,) next slot offset per class
    updates_applied: int = 0

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.cursors is None:
            self.cursors = np.zeros(self.n_classes, dtype=np.int64)
        self.slots_per_class = _ranges_from_labels(self.labels, self.n_classes)

    @property
    def K(self) -> int:
        return self.features.shape[0]

    @property
    def D(self) -> int:
        return self.features.shape[1]

    def slot_counts(self) -> np.ndarray:
        return np.array([stop - start for start, stop in self.slots_per_class])

    def copy(self) -> InstanceBank:
        return InstanceBank(
            self.features.copy(), self.labels.copy(), self.n_classes, self.cursors.copy(), self.updates_applied
        )

    def __eq__(self, other):
        if not isinstance(other, InstanceBank):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and self.updates_applied == other.updates_applied
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.cursors, other.cursors)
        )


def _ranges_from_labels(labels: np.ndarray, n_classes: int) -> list[tuple[int, int]]:
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError("bank labels out of range")
    if np.any(np.diff(labels) < 0):
        raise ValueError("bank labels must be grouped by class in ascending order")
    counts = np.bincount(labels, minlength=n_classes)
    if np.any(counts == 0):
        raise ValueError("every class must own at least one slot")
    stops = np.cumsum(counts)
    return [(int(s - n), int(s)) for s, n in zip(stops, counts)]


def _apportion(K: int, weights: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of K slots with a floor of one per class."""
    C = len(weights)
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    spare = K - C
    share = w * spare
    counts = np.floor(share).astype(np.int64)
    left = spare - int(counts.sum())
    # stable order: larger remainder first, ties to the lower class id
    order = np.lexsort((np.arange(C), -(share - counts)))
    counts[order[:left]] += 1
    return counts + 1


def slot_layout(K: int, C: int, sampling: str = "CBS", class_freq=None) -> np.ndarray:
    """Per-class slot counts for a bank of K holders.

    CBS gives every class ``K // C`` slots and one extra to the first
    ``K % C`` classes. RS and NU follow the class frequencies, ILS their
    inverse; both keep at least one slot per class.
    """
    if C < 1 or K < C:
        raise ValueError(f"bank of size K={K} cannot hold C={C} classes")
    if sampling == "CBS" or class_freq is None:
        counts = np.full(C, K // C, dtype=np.int64)
        counts[: K % C] += 1
        return counts
    freq = np.asarray(class_freq, dtype=np.float64)
    if freq.shape != (C,) or np.any(freq <= 0):
        raise ValueError("class_freq must hold C positive weights")
    if sampling in ("RS", "NU"):
        return _apportion(K, freq)
    if sampling == "ILS":
        return _apportion(K, 1.0 / freq)
    raise ValueError(f"unknown sampling {sampling!r}")


def random_unit_rows(n: int, D: int, rng: Rng) -> np.ndarray:
    rows = rng.standard_normal((n, D))
    out, norms = l2_normalize_rows(rows)
    return out


def init_bank(K: int, C: int, D: int, rng: Rng, seed_pool=None, sampling: str = "CBS", class_freq=None) -> InstanceBank:
    """Create a bank with the slot layout for ``sampling``.

    ``seed_pool`` is an optional sequence of ``(embedding, label)`` pairs;
    each class's slots are filled from its pool entries in order (cycling),
    and classes without entries fall back to random unit vectors.
    """
    if D < 1:
        raise ValueError("embedding dimension must be >= 1")
    counts = slot_layout(K, C, sampling, class_freq)
    labels = np.repeat(np.arange(C), counts)
    features = random_unit_rows(K, D, rng)
    if seed_pool is not None:
        by_class: dict[int, list[np.ndarray]] = {}
        for emb, lab in seed_pool:
            emb = np.asarray(emb, dtype=np.float64)
            if emb.shape != (D,):
                raise ValueError(f"seed embedding has shape {emb.shape}, expected ({D},)")
            by_class.setdefault(int(lab), []).append(emb)
        start = 0
        for c, n in enumerate(counts):
            pool = by_class.get(c, [])
            for s in range(n):
                if pool:
                    try:
                        features[start + s] = l2_normalize(pool[s % len(pool)])
                    except ValueError:
                        pass  # zero embedding: keep the random row
            start += n
    return InstanceBank(features, labels, C)


def boundary_mask(labels, sigma: int = 2) -> np.ndarray:
    """Mark pixels whose 3x3 neighbourhood contains more than ``sigma`` classes.

    Windows are truncated at the image border, so corner pixels see 4
    labels and edge pixels 6.
    """
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError("labels must be an (H, W) grid")
    return kernels.boundary_mask(lab.astype(np.int64), int(sigma))


@dataclass
class BoundaryArtifacts:
    mask: np.ndarray  # (H, W) uint8
    boundary_labels: np.ndarray  # (H, W) class id, -1 where not a boundary
    per_class_boundary_mean: dict[int, np.ndarray]
    per_class_centroid: dict[int, np.ndarray]
    per_class_avg: dict[int, np.ndarray]


def _dominant_centroid(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    k = min(k, len(points))
    if k == 1:
        return points.mean(axis=0)
    centroids, assign = kmeans(points, k, rng)
    sizes = np.bincount(assign, minlength=k)
    return centroids[int(np.argmax(sizes))]


def boundary_artifacts(features, labels, mask, rng: Rng, kmeans_k: int = 1) -> BoundaryArtifacts:
    """Boundary-pixel means, non-edge centroids and their average per class.

    A class with boundary pixels but no interior pixels uses the boundary
    mean alone, and vice versa.
    """
    feats = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    m = np.asarray(mask).astype(bool)
    if feats.shape[:2] != lab.shape or lab.shape != m.shape:
        raise ValueError("features, labels and mask must share (H, W)")
    flat = feats.reshape(-1, feats.shape[2])
    lab_f = lab.ravel()
    m_f = m.ravel()
    b_mean, centroid, avg = {}, {}, {}
    for c in np.unique(lab_f):
        c = int(c)
        edge = flat[(lab_f == c) & m_f]
        inner = flat[(lab_f == c) & ~m_f]
        if len(edge):
            b_mean[c] = edge.mean(axis=0)
        if len(inner):
            centroid[c] = _dominant_centroid(inner, kmeans_k, rng)
        if c in b_mean and c in centroid:
            avg[c] = 0.5 * (b_mean[c] + centroid[c])
        else:
            avg[c] = b_mean[c] if c in b_mean else centroid[c]
    return BoundaryArtifacts(
        mask=m.astype(np.uint8),
        boundary_labels=np.where(m, lab, -1),
        per_class_boundary_mean=b_mean,
        per_class_centroid=centroid,
        per_class_avg=avg,
    )


def select_embeddings(features, labels, mask, rng: Rng, policy: BankUpdatePolicy) -> dict[int, np.ndarray]:
    """One update embedding per class present in the image.

    Absent classes are simply missing from the result, which makes the EMA
    step skip them for this round.
    """
    feats = np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.int64)
    if feats.shape[:2] != lab.shape:
        raise ValueError("features and labels must share (H, W)")
    if policy.selecting == "BPS":
        return boundary_artifacts(feats, lab, mask, rng, policy.kmeans_k).per_class_avg
    flat = feats.reshape(-1, feats.shape[2])
    lab_f = lab.ravel()
    out = {}
    for c in np.unique(lab_f):
        pts = flat[lab_f == c]
        if policy.selecting == "AVG":
            out[int(c)] = pts.mean(axis=0)
        elif policy.selecting == "KM":
            out[int(c)] = _dominant_centroid(pts, policy.kmeans_k, rng)
        else:
            out[int(c)] = pts[int(rng.integers(len(pts)))].copy()
    return out


def ema_update(bank: InstanceBank, selected: dict[int, np.ndarray], policy: BankUpdatePolicy, renormalize: bool = True) -> InstanceBank:
    """Blend selected embeddings into the bank: ``w * old + (1 - w) * new``.

    Returns a new bank; the input is not modified. ``round_robin`` updates
    the slot under each class cursor and advances it, ``broadcast`` updates
    every slot of the class. With ``renormalize=False`` the raw blended rows
    are kept, which exposes the pre-normalization recursion.
    """
    out = bank.copy()
    if policy.sampling == "NU":
        return out
    w = float(policy.momentum)
    for c in sorted(selected):
        if not 0 <= c < bank.n_classes:
            raise ValueError(f"class {c} outside [0, {bank.n_classes})")
        start, stop = out.slots_per_class[c]
        if policy.slot_mode == "broadcast":
            rows = np.arange(start, stop)
        else:
            rows = np.array([start + out.cursors[c]])
            out.cursors[c] = (out.cursors[c] + 1) % (stop - start)
        target = np.asarray(selected[c], dtype=np.float64)
        raw = w * out.features[rows] + (1.0 - w) * target[None, :]
        if renormalize:
            normed, norms = l2_normalize_rows(raw)
            # a blend that cancels to zero keeps the previous row
            keep = norms == 0.0
            normed[keep] = out.features[rows][keep]
            raw = normed
        out.features[rows] = raw
    out.updates_applied += 1
    return out


def save_bank(bank: InstanceBank) -> bytes:
    """Serialize: header {magic, version, K, C, D}, features (f64), labels (i32),
    cursors (i32), updates_applied (u64). All little-endian."""
    parts = [
        _HEADER.pack(MAGIC, VERSION, bank.K, bank.n_classes, bank.D),
        bank.features.astype("<f8").tobytes(),
        bank.labels.astype("<i4").tobytes(),
        bank.cursors.astype("<i4").tobytes(),
        struct.pack("<Q", bank.updates_applied),
    ]
    return b"".join(parts)


def load_bank(data: bytes) -> InstanceBank:
    if len(data) < _HEADER.size:
        raise ValueError("bank stream truncated: missing header")
    magic, version, K, C, D = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"bad bank magic {magic!r}")
    if version != VERSION:
        raise ValueError(f"unsupported bank version {version}")
    expected = _HEADER.size + 8 * K * D + 4 * K + 4 * C + 8
    if len(data) != expected:
        raise ValueError(f"bank stream size mismatch: expected {expected} bytes, got {len(data)}")
    off = _HEADER.size
    feats = np.frombuffer(data, "<f8", K * D, off).astype(np.float64).reshape(K, D)
    off += 8 * K * D
    labels = np.frombuffer(data, "<i4", K, off).astype(np.int64)
    off += 4 * K
    cursors = np.frombuffer(data, "<i4", C, off).astype(np.int64)
    off += 4 * C
    (updates,) = struct.unpack_from("<Q", data, off)
    return InstanceBank(feats, labels, C, cursors, int(updates))


def bank_stats(bank: InstanceBank) -> dict:
    """Per-class slot statistics, JSON-ready."""
    classes = []
    for c, (start, stop) in enumerate(bank.slots_per_class):
        rows = bank.features[start:stop]
        norms = np.linalg.norm(rows, axis=1)
        mean_dir = rows.mean(axis=0)
        classes.append(
            {
                "class": c,
                "slots": stop - start,
                "first_slot": start,
                "cursor": int(bank.cursors[c]),
                "norm_min": float(norms.min()),
                "norm_max": float(norms.max()),
                "mean_pairwise_cosine": float(_mean_pairwise_cos(rows)),
                "mean_resultant_length": float(np.linalg.norm(mean_dir)),
            }
        )
    return {"K": bank.K, "C": bank.n_classes, "D": bank.D, "updates_applied": bank.updates_applied, "classes": classes}


def _mean_pairwise_cos(rows: np.ndarray) -> float:
    n = len(rows)
    if n < 2:
        return 1.0
    unit, _ = l2_normalize_rows(rows)
    g = unit @ unit.T
    return (g.sum() - np.trace(g)) / (n * (n - 1))
