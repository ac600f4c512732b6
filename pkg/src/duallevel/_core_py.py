"""Pure numpy versions of the hot kernels.

Used when the compiled ``_core`` extension is unavailable or when
``DUALLEVEL_PURE_PYTHON=1`` is set. Contracts match ``_core.pyx``; results
agree to rounding (reduction order differs).
"""
import numpy as np

SMOOTHING = 0
SCALING = 1

FLAG_Q_FALLBACK = 1
FLAG_Z_FALLBACK = 2

_DEGENERATE = 1e-12


def boundary_mask(labels, sigma):
    """Flag pixels whose 3x3 window (truncated at borders) holds > sigma classes."""
    lab = np.ascontiguousarray(labels, dtype=np.int64)
    h, w = lab.shape
    classes = np.unique(lab)
    count = np.zeros((h, w), dtype=np.int64)
    for c in classes:
        hit = lab == c
        pad = np.zeros((h + 2, w + 2), dtype=bool)
        pad[1:-1, 1:-1] = hit
        seen = np.zeros((h, w), dtype=bool)
        for di in range(3):
            for dj in range(3):
                seen |= pad[di : di + h, dj : dj + w]
        count += seen
    return (count > sigma).astype(np.uint8)


def lloyd_assign(points, centroids):
    """Index of the nearest centroid per point; ties go to the lowest index."""
    diff = points[:, None, :] - centroids[None, :, :]
    d = np.einsum("nkd,nkd->nk", diff, diff)
    return np.argmin(d, axis=1).astype(np.int64)


def regenerate(z, q, bank_labels, n_classes, phi, z_mode, q_mode):
    """Per-pixel scatter / scale / gather / smooth on snapshot inputs.

    z: (N, C) semantic simplex rows; q: (N, K) instance simplex rows.
    Returns (z_sc, q_ga, z_hat, q_hat, flags).
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    q = np.ascontiguousarray(q, dtype=np.float64)
    labels = np.asarray(bank_labels, dtype=np.int64)
    n = z.shape[0]
    flags = np.zeros(n, dtype=np.uint8)

    z_sc = z[:, labels]
    q_ga = np.zeros((n, n_classes))
    for c in range(n_classes):
        sel = labels == c
        if sel.any():
            q_ga[:, c] = q[:, sel].sum(axis=1)

    if q_mode == SCALING:
        num = q * z_sc
        den = num.sum(axis=1)
        bad = den < _DEGENERATE
        q_hat = num / np.where(bad, 1.0, den)[:, None]
        q_hat[bad] = q[bad]
    else:
        # smoothing analog: pull q toward the scattered semantic mass, renormalized
        den = z_sc.sum(axis=1)
        bad = den < _DEGENERATE
        target = z_sc / np.where(bad, 1.0, den)[:, None]
        q_hat = phi * q + (1.0 - phi) * target
        q_hat[bad] = q[bad]
    flags[bad] |= FLAG_Q_FALLBACK

    if z_mode == SMOOTHING:
        z_hat = phi * z + (1.0 - phi) * q_ga
        # clamp rounding drift so the convex bound holds exactly
        z_hat = np.clip(z_hat, np.minimum(z, q_ga), np.maximum(z, q_ga))
    else:
        num = z * q_ga
        den = num.sum(axis=1)
        bad = den < _DEGENERATE
        z_hat = num / np.where(bad, 1.0, den)[:, None]
        z_hat[bad] = z[bad]
        flags[bad] |= FLAG_Z_FALLBACK
    return z_sc, q_ga, z_hat, q_hat, flags

