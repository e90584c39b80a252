"""Time the numba and numpy kernel backends on representative problem sizes.

Usage: python benchmarks/bench_kernels.py [--n 2000] [--groups 600] [--arms 3] [--repeat 5]

Both backends are importable side by side, so no environment flag is needed
here; the flag only decides which one the package binds by default.
"""
import argparse
import time

import numpy as np

from rulehte import kernels
from rulehte.basis import grouped_design_from_basis


def _best_of(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--groups", type=int, default=600)
    ap.add_argument("--arms", type=int, default=3)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    n, G, A = args.n, args.groups, args.arms
    X = rng.standard_normal((n, 10))
    R = rng.standard_normal((n, A - 1))
    u = np.ones(A - 1)
    rows = np.arange(n)
    cols = np.arange(X.shape[1])
    w = np.arange(n) % A
    rng.shuffle(w)
    raw = (rng.standard_normal((n, G)) > rng.standard_normal(G)).astype(float)
    design = grouped_design_from_basis(raw, w, A)
    y = raw[:, :5] @ rng.standard_normal(5) + rng.standard_normal(n)
    r0 = y - np.bincount(w, weights=y, minlength=A)[w] / np.bincount(w, minlength=A)[w]
    gram = np.ascontiguousarray(design.gram)
    lam = 0.05 * np.abs(kernels.gradients(design.Bt, w, A, r0)).max()
    pen = np.full(G, lam * np.sqrt(A - 1))
    idx = np.arange(G)

    def bcd_case(fn):
        def run():
            fn(design.Bt, w, A, r0.copy(), np.zeros((G, A)), gram, pen, idx, 1e-6, 10_000)
        return run

    cases = {
        "best_split": (lambda: kernels.best_split_numba(X, rows, R, u, cols, 10),
                       lambda: kernels.best_split_numpy(X, rows, R, u, cols, 10)),
        "bcd": (bcd_case(kernels.bcd_numba), bcd_case(kernels.bcd_numpy)),
        "gradients": (lambda: kernels.gradients_numba(design.Bt, w, A, r0),
                      lambda: kernels.gradients_numpy(design.Bt, w, A, r0)),
    }
    print(f"n={n} groups={G} arms={A} (best of {args.repeat})")
    print(f"{'kernel':<12}{'numba ms':>12}{'numpy ms':>12}{'speed-up':>10}")
    for name, (fast, slow) in cases.items():
        a, b = _best_of(fast, args.repeat), _best_of(slow, args.repeat)
        print(f"{name:<12}{a * 1e3:>12.3f}{b * 1e3:>12.3f}{b / a:>10.1f}x")


if __name__ == "__main__":
    main()
