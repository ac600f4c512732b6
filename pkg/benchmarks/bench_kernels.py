"""Time the compiled kernels against the numpy fallback at desk-scale sizes.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from duallevel import _core_py

try:
    from duallevel import _core
except ImportError:
    _core = None


def cases(rng):
    C, K, H, W = 5, 50, 64, 64
    labels = rng.integers(0, C, (H // 8, W // 8)).repeat(8, 0).repeat(8, 1)
    pts = rng.normal(size=(800, 16))
    cen = rng.normal(size=(4, 16))
    bank_labels = np.repeat(np.arange(C), K // C)
    z = rng.dirichlet(np.ones(C), H * W)
    q = rng.dirichlet(np.ones(K), H * W)
    return {
        "boundary_mask 64x64": lambda m: m.boundary_mask(labels, 1),
        "lloyd_assign 800x4x16": lambda m: m.lloyd_assign(pts, cen),
        "regenerate 4096 px, K=50": lambda m: m.regenerate(z, q, bank_labels, C, 0.9, m.SMOOTHING, m.SCALING),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(_core_py), number=1, repeat=args.repeat)) * 1e3
        if _core is None:
            print(f"{name:28s} {t_py:10.3f} {'n/a':>10s} {'':>8s}")
            continue
        t_c = min(timeit.repeat(lambda: fn(_core), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:28s} {t_py:10.3f} {t_c:10.3f} {t_py / t_c:7.1f}x")


if __name__ == "__main__":
    main()
