"""Shared deterministic numerical kernels.

Grids are numpy arrays in row-major ``(H, W, channels)`` order; flat pixel
index ``i = row * W + col``. Randomness always flows through an explicit
:class:`numpy.random.Generator` backed by PCG64, which numpy guarantees to
produce the same stream on every platform for the same seed.
"""
from __future__ import annotations

import zlib

import numpy as np

from duallevel import kernels

Rng = np.random.Generator


def make_rng(seed: int, *stream: str | int) -> Rng:
    """Return a PCG64 generator for ``seed``, optionally on a named sub-stream.

    Sub-streams (e.g. ``make_rng(7, "augment")``) are independent of each
    other and of the root stream, so adding a consumer to one part of the
    pipeline never shifts the draws seen by another.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for key in stream:
        if isinstance(key, str):
            words.append(zlib.crc32(key.encode("utf-8")))
        else:
            words.append(int(key) & 0xFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def as_grid(data, channels: int | None = None) -> np.ndarray:
    """Validate a dense ``(H, W, C)`` grid of finite float64 values."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected an (H, W, C) grid, got shape {arr.shape}")
    if channels is not None and arr.shape[2] != channels:
        raise ValueError(f"expected {channels} channels, got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("grid contains non-finite values")
    return arr


def l2_normalize(v) -> np.ndarray:
    """Scale a vector to unit Euclidean length.

    Raises ``ValueError("zero norm")`` for the zero vector; callers pick
    their own fallback.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite input")
    norm = np.sqrt(np.dot(v, v))
    if norm == 0.0:
        raise ValueError("zero norm")
    out = v / norm
    # one refinement pass pulls the norm to within an ulp of 1
    return out / np.sqrt(np.dot(out, out))


def l2_normalize_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise normalization; zero rows stay zero.

    Returns ``(normalized, norms)``.
    """
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    safe = np.where(norms > 0.0, norms, 1.0)
    out = x / safe[:, None]
    out[norms == 0.0] = 0.0
    return out, norms


def softmax_temp(scores, tp: float = 1.0) -> np.ndarray:
    """Temperature softmax along the last axis, stabilized by a max shift."""
    if not tp > 0:
        raise ValueError(f"temperature must be positive, got {tp}")
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("non-finite scores")
    shifted = (s - s.max(axis=-1, keepdims=True)) / tp
    ex = np.exp(shifted)
    return ex / ex.sum(axis=-1, keepdims=True)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _kmeanspp_seed(points: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with a centroid
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[j : j + 1])[:, 0])
    return centroids


def _means(points: np.ndarray, assign: np.ndarray, k: int, centroids: np.ndarray) -> tuple[np.ndarray, bool]:
    """Recompute centroids; an empty cluster is re-seeded at the farthest point."""
    out = np.empty_like(centroids)
    reseeded = False
    for j in range(k):
        members = points[assign == j]
        if len(members):
            out[j] = members.mean(axis=0)
        else:
            d = _sq_dists(points, centroids).min(axis=1)
            out[j] = points[int(np.argmax(d))]
            reseeded = True
    return out, reseeded


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int, tol: float):
    k = centroids.shape[0]
    assign = kernels.lloyd_assign(points, centroids)
    for _ in range(max_iter):
        new_centroids, reseeded = _means(points, assign, k, centroids)
        new_assign = kernels.lloyd_assign(points, new_centroids)
        shift = float(np.max(np.abs(new_centroids - centroids)))
        centroids = new_centroids
        if not reseeded and np.array_equal(new_assign, assign) and shift <= tol:
            assign = new_assign
            break
        assign = new_assign
    # finish on an exact fixed point: means of the final assignment
    centroids, _ = _means(points, assign, k, centroids)
    cost = float(_sq_dists(points, centroids)[np.arange(len(points)), assign].sum())
    return centroids, assign, cost


def kmeans(points, k: int, rng: Rng, max_iter: int = 100, tol: float = 0.0, n_init: int = 8):
    """Lloyd's k-means with k-means++ seeding drawn from ``rng``.

    Runs ``n_init`` seeded restarts and keeps the lowest-cost result. The
    returned pair is a Lloyd fixed point whenever ``max_iter`` suffices:
    every point is assigned to a nearest centroid and every centroid is the
    mean of its members.

    Returns ``(centroids, assignments)`` with shapes ``(k, D)`` and ``(N,)``.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError("points must be an (N, D) array")
    n = pts.shape[0]
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise ValueError(f"need at least k={k} points, got {n}")
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeanspp_seed(pts, k, rng)
        centroids, assign, cost = _lloyd(pts, init, max_iter, tol)
        if best is None or cost < best[2]:
            best = (centroids, assign, cost)
    return best[0], best[1]


def kmeans_cost(points, centroids, assignments) -> float:
    pts = np.asarray(points, dtype=np.float64)
    diff = pts - np.asarray(centroids)[np.asarray(assignments)]
    return float(np.einsum("nd,nd->", diff, diff))
