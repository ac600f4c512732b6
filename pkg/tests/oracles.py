"""Independent reference implementations used as test oracles.

Nothing here calls into the code path it checks: the boundary oracle is a
naive double loop, k-means optimality is checked by enumerating partitions,
gradients by central differences, and the baseline loop re-implements the
semantic-only objective from scratch.
"""
import itertools

import numpy as np


def naive_boundary_mask(labels, sigma):
    lab = np.asarray(labels)
    h, w = lab.shape
    out = np.zeros((h, w), dtype=np.uint8)
    for i in range(h):
        for j in range(w):
            seen = set()
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    a, b = i + di, j + dj
                    if 0 <= a < h and 0 <= b < w:
                        seen.add(int(lab[a, b]))
            if len(seen) > sigma:
                out[i, j] = 1
    return out


def partitions(n, k):
    """All surjective labelings of n items into k unlabeled groups (canonical form)."""
    for assign in itertools.product(range(k), repeat=n):
        # canonical: first occurrence order 0, 1, 2, ...
        seen = []
        ok = True
        for a in assign:
            if a not in seen:
                if a != len(seen):
                    ok = False
                    break
                seen.append(a)
        if ok and len(seen) == k:
            yield np.array(assign)


def exhaustive_kmeans_cost(points, k):
    pts = np.asarray(points, dtype=np.float64)
    best = np.inf
    for assign in partitions(len(pts), k):
        cost = 0.0
        for j in range(k):
            members = pts[assign == j]
            cost += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, cost)
    return best


def lloyd_fixed_point(points, centroids, assignments, atol=1e-12):
    """True iff every point sits at a nearest centroid and centroids are member means."""
    pts = np.asarray(points, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)
    d = ((pts[:, None, :] - cen[None, :, :]) ** 2).sum(axis=2)
    if np.any(d[np.arange(len(pts)), assignments] > d.min(axis=1) + atol):
        return False
    for j in range(len(cen)):
        members = pts[assignments == j]
        if len(members) == 0 or np.max(np.abs(members.mean(axis=0) - cen[j])) > atol:
            return False
    return True


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    den = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / den))


# -- reference semantic-only self-training -----------------------------------


def _softmax(x):
    x = x - x.max(axis=1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=1, keepdims=True)


def reference_semantic_loop(cfg, source, target):
    """Plain self-training written without the package's loss/step helpers.

    Reuses only the model container, featurizer, augmentation and sampler,
    which fix the shared random streams. Returns ``(model, L_src list, L_tgt list)``.
    """
    from duallevel.numerics import make_rng
    from duallevel.model import featurize
    from duallevel.selftrain import CyclicSampler, augment_pair, create_model

    tr = cfg.train
    model = create_model(cfg)
    s_order = CyclicSampler(len(source), make_rng(tr.seed, "order", "source"))
    t_order = CyclicSampler(len(target), make_rng(tr.seed, "order", "target"))
    aug = make_rng(tr.seed, "augment")
    l_src_hist, l_tgt_hist = [], []

    def fwd(img):
        raw = featurize(model, img)
        a = raw @ model.W
        n = np.sqrt(np.einsum("ij,ij->i", a, a))
        e = np.where(n[:, None] > 0, a / np.where(n > 0, n, 1.0)[:, None], 0.0)
        return raw, n, e, _softmax(e @ model.V)

    def grads(raw, n, e, d_logits):
        dV = e.T @ d_logits
        de = d_logits @ model.V.T
        da = (de - e * np.einsum("nd,nd->n", e, de)[:, None]) / np.where(n > 0, n, 1.0)[:, None]
        da[n == 0] = 0.0
        return raw.T @ da, dV

    for _ in range(tr.iterations):
        js, jt = s_order.next(), t_order.next()
        x_s, y_s = source.images[js], source.labels[js].ravel()
        views = augment_pair(target.images[jt], cfg.augment, aug)
        raw, n, e, p = fwd(x_s)
        N = len(y_s)
        l_src_hist.append(float(-np.mean(np.log(np.maximum(p[np.arange(N), y_s], 1e-12)))))
        g = p.copy()
        g[np.arange(N), y_s] -= 1.0
        dW, dV = grads(raw, n, e, g / N)

        _, _, _, pw = fwd(views.weak)
        raw_a, n_a, e_a, pa = fwd(views.strong)
        hard = np.argmax(pw, axis=1)
        keep = pw[np.arange(N), hard] > tr.tau
        per = -np.log(np.maximum(pa[np.arange(N), hard], 1e-12))
        l_tgt_hist.append(float(np.sum(np.where(keep, per, 0.0)) / N))
        g = pa.copy()
        g[np.arange(N), hard] -= 1.0
        g[~keep] = 0.0
        gW, gV = grads(raw_a, n_a, e_a, g / N)
        model.W -= tr.lr * (dW + gW)
        model.V -= tr.lr * (dV + gV)
    return model, l_src_hist, l_tgt_hist
