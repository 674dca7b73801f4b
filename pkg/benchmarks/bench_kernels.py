"""Compare the compiled kernels with the pure-Python fallback.

Run with ``python benchmarks/bench_kernels.py [--rows N] [--repeat R]``.
Both backends must produce identical outputs; timings are the best of R runs.
"""

from __future__ import annotations

import argparse
import sys
import time

import numpy as np

from peerscore.models import _kernels_py

try:
    from peerscore.models import _kernels
except ImportError:
    _kernels = None


def best_of(repeat, fn, *args):
    best, out = float("inf"), None
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t)
    return best, out


def same(a, b) -> bool:
    if isinstance(a, tuple):
        return len(a) == len(b) and all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def workload(rows: int, cols: int, seed: int):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(rows, cols)) * rng.uniform(0.1, 1000, size=cols)
    X[:, :3] = np.round(X[:, :3])  # ties
    y = X[:, 0] * 0.5 + np.sin(X[:, 1]) + rng.normal(size=rows)
    Q = rng.normal(size=(rows // 4, cols)) * X.std(axis=0)
    return X, y, Q


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--rows", type=int, default=4000)
    ap.add_argument("--cols", type=int, default=40)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    if _kernels is None:
        print("compiled extension not built; nothing to compare")
        return 1

    X, y, Q = workload(args.rows, args.cols, args.seed)
    sample = np.random.default_rng(args.seed + 1).integers(0, len(y), size=len(y)).astype(np.int64)
    mtry = max(1, args.cols // 3)
    order_col = int(np.argmax(X.var(axis=0)))
    order = np.argsort(X[:, order_col], kind="stable").astype(np.int64)
    proj = np.ascontiguousarray(X[order, order_col])

    cases = [
        ("build_tree", lambda k: k.build_tree(X, y, sample, 2, -1, mtry, 12345)),
        ("predict_tree", None),
        ("knn_predict", lambda k: k.knn_predict(X, y, Q, 5, order_col, order, proj)),
    ]
    print(f"rows={args.rows} cols={args.cols} repeat={args.repeat}")
    print(f"{'kernel':<14}{'compiled s':>12}{'python s':>12}{'speedup':>10}  equal")
    ok = True
    tree = None
    for name, fn in cases:
        if name == "predict_tree":
            tc, oc = best_of(args.repeat, _kernels.predict_tree, Q, *tree)
            tp, op = best_of(args.repeat, _kernels_py.predict_tree, Q, *tree)
        else:
            tc, oc = best_of(args.repeat, fn, _kernels)
            tp, op = best_of(args.repeat, fn, _kernels_py)
        eq = same(oc, op)
        ok &= eq
        if name == "build_tree":
            tree = oc
        print(f"{name:<14}{tc:>12.4f}{tp:>12.4f}{tp / tc:>9.1f}x  {eq}")
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
