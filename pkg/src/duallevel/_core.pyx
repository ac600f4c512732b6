# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled per-pixel kernels. Same contracts as ``_core_py``."""
import numpy as np
cimport numpy as cnp

cnp.import_array()

SMOOTHING = 0
SCALING = 1

FLAG_Q_FALLBACK = 1
FLAG_Z_FALLBACK = 2

cdef double _DEGENERATE = 1e-12


def boundary_mask(labels, long sigma):
    cdef cnp.int64_t[:, ::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t h = lab.shape[0], w = lab.shape[1]
    out = np.zeros((h, w), dtype=np.uint8)
    cdef cnp.uint8_t[:, ::1] m = out
    cdef cnp.int64_t seen[9]
    cdef Py_ssize_t i, j, di, dj, t
    cdef long count
    cdef cnp.int64_t v
    cdef bint fresh
    for i in range(h):
        for j in range(w):
            count = 0
            for di in range(max(i - 1, 0), min(i + 2, h)):
                for dj in range(max(j - 1, 0), min(j + 2, w)):
                    v = lab[di, dj]
                    fresh = True
                    for t in range(count):
                        if seen[t] == v:
                            fresh = False
                            break
                    if fresh:
                        seen[count] = v
                        count += 1
            if count > sigma:
                m[i, j] = 1
    return out


def lloyd_assign(points, centroids):
    cdef double[:, ::1] p = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef Py_ssize_t n = p.shape[0], k = c.shape[0], d = p.shape[1]
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] a = out
    cdef Py_ssize_t i, j, t
    cdef double best, dist, diff
    cdef cnp.int64_t arg
    for i in range(n):
        best = 0.0
        arg = -1
        for j in range(k):
            dist = 0.0
            for t in range(d):
                diff = p[i, t] - c[j, t]
                dist += diff * diff
            if arg < 0 or dist < best:
                best = dist
                arg = j
        a[i] = arg
    return out


def regenerate(z, q, bank_labels, Py_ssize_t n_classes, double phi, int z_mode, int q_mode):
    cdef double[:, ::1] zv = np.ascontiguousarray(z, dtype=np.float64)
    cdef double[:, ::1] qv = np.ascontiguousarray(q, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = np.ascontiguousarray(bank_labels, dtype=np.int64)
    cdef Py_ssize_t n = zv.shape[0], kk = qv.shape[1]
    z_sc_a = np.empty((n, kk))
    q_ga_a = np.zeros((n, n_classes))
    z_hat_a = np.empty((n, n_classes))
    q_hat_a = np.empty((n, kk))
    flags_a = np.zeros(n, dtype=np.uint8)
    cdef double[:, ::1] z_sc = z_sc_a
    cdef double[:, ::1] q_ga = q_ga_a
    cdef double[:, ::1] z_hat = z_hat_a
    cdef double[:, ::1] q_hat = q_hat_a
    cdef cnp.uint8_t[::1] flags = flags_a
    cdef Py_ssize_t i, k, c
    cdef double den, val, lo, hi
    for i in range(n):
        for k in range(kk):
            z_sc[i, k] = zv[i, lab[k]]
            q_ga[i, lab[k]] += qv[i, k]

        den = 0.0
        if q_mode == SCALING:
            for k in range(kk):
                den += qv[i, k] * z_sc[i, k]
            if den < _DEGENERATE:
                for k in range(kk):
                    q_hat[i, k] = qv[i, k]
                flags[i] |= FLAG_Q_FALLBACK
            else:
                for k in range(kk):
                    q_hat[i, k] = qv[i, k] * z_sc[i, k] / den
        else:
            for k in range(kk):
                den += z_sc[i, k]
            if den < _DEGENERATE:
                for k in range(kk):
                    q_hat[i, k] = qv[i, k]
                flags[i] |= FLAG_Q_FALLBACK
            else:
                for k in range(kk):
                    q_hat[i, k] = phi * qv[i, k] + (1.0 - phi) * (z_sc[i, k] / den)

        if z_mode == SMOOTHING:
            for c in range(n_classes):
                val = phi * zv[i, c] + (1.0 - phi) * q_ga[i, c]
                lo = zv[i, c] if zv[i, c] < q_ga[i, c] else q_ga[i, c]
                hi = zv[i, c] if zv[i, c] > q_ga[i, c] else q_ga[i, c]
                z_hat[i, c] = lo if val < lo else (hi if val > hi else val)
        else:
            den = 0.0
            for c in range(n_classes):
                den += zv[i, c] * q_ga[i, c]
            if den < _DEGENERATE:
                for c in range(n_classes):
                    z_hat[i, c] = zv[i, c]
                flags[i] |= FLAG_Z_FALLBACK
            else:
                for c in range(n_classes):
                    z_hat[i, c] = zv[i, c] * q_ga[i, c] / den
    return z_sc_a, q_ga_a, z_hat_a, q_hat_a, flags_a

