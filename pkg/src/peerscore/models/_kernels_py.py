"""Pure-Python/numpy fallback for the compiled kernels (same results, slower)."""

from __future__ import annotations

import numpy as np

BACKEND = "python"

_MASK = 0xFFFFFFFFFFFFFFFF


class SplitMix64:
    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)


def build_tree(X, y, sample_idx, min_leaf, max_depth, mtry, seed):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.ascontiguousarray(y, dtype=float)
    idx = np.array(sample_idx, dtype=np.int64)
    n = len(idx)
    p = X.shape[1]
    rng = SplitMix64(seed)
    feature, threshold, left, right, value = [-1], [0.0], [-1], [-1], [0.0]
    stack = [(0, 0, n, 0)]
    while stack:
        node, start, end, depth = stack.pop()
        m = end - start
        rows = idx[start:end]
        ys = y[rows]
        total = np.cumsum(ys)[-1]
        mean = total / m
        ymin, ymax = ys.min(), ys.max()
        value[node] = min(max(mean, ymin), ymax)
        if m < 2 * min_leaf or ymin == ymax or (max_depth >= 0 and depth >= max_depth):
            continue

        perm = list(range(p))
        best_gain, best_f, best_thr = 0.0, -1, 0.0
        evaluated = ii = 0
        while ii < p and evaluated < mtry:
            j = ii + rng.next() % (p - ii)
            perm[ii], perm[j] = perm[j], perm[ii]
            f = perm[ii]
            ii += 1
            xs = X[rows, f]
            if xs.min() == xs.max():
                continue
            evaluated += 1
            order = np.lexsort((rows, xs))
            xsorted = xs[order]
            ysorted = y[rows[order]] - mean
            cl = np.cumsum(ysorted)
            tot = cl[-1]
            parent = tot * tot / m
            pos = np.arange(m - 1)
            sl = cl[:-1]
            sr = tot - sl
            gain = sl * sl / (pos + 1.0) + sr * sr / (m - pos - 1.0) - parent
            valid = (pos >= min_leaf - 1) & (pos <= m - min_leaf - 1) & (xsorted[:-1] != xsorted[1:])
            if not valid.any():
                continue
            g = np.where(valid, gain, -np.inf)
            at = int(np.argmax(g))
            if g[at] > best_gain:
                best_gain = g[at]
                best_f = f
                a, b = xsorted[at], xsorted[at + 1]
                mid = (a + b) / 2.0
                best_thr = a if mid >= b else mid
        if best_f < 0:
            continue

        goes_left = X[rows, best_f] <= best_thr
        nl = int(goes_left.sum())
        idx[start:end] = np.concatenate([rows[goes_left], rows[~goes_left]])
        feature[node] = best_f
        threshold[node] = best_thr
        left[node] = len(feature)
        right[node] = len(feature) + 1
        for _ in range(2):
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
        stack.append((right[node], start + nl, end, depth + 1))
        stack.append((left[node], start, start + nl, depth + 1))
    return (np.array(feature, dtype=np.int64), np.array(threshold), np.array(left, dtype=np.int64),
            np.array(right, dtype=np.int64), np.array(value))


def predict_tree(X, feature, threshold, left, right, value):
    X = np.asarray(X, dtype=float)
    node = np.zeros(len(X), dtype=np.int64)
    active = feature[node] >= 0
    while active.any():
        rows = np.flatnonzero(active)
        nd = node[rows]
        go_left = X[rows, feature[nd]] <= threshold[nd]
        node[rows] = np.where(go_left, left[nd], right[nd])
        active = feature[node] >= 0
    return value[node]


def _sq_dist(X, rows, q):
    d2 = np.zeros(len(rows))
    sub = X[rows]
    for j in range(X.shape[1]):
        diff = sub[:, j] - q[j]
        d2 += diff * diff
    return d2


def knn_predict(X, y, Q, k, col, order, proj):
    X = np.asarray(X, dtype=float)
    Q = np.asarray(Q, dtype=float)
    n = len(X)
    out = np.empty(len(Q))
    for qi, q in enumerate(Q):
        qc = q[col]
        pos = int(np.searchsorted(proj, qc, side="left"))
        seed_rows = order[max(0, pos - k):min(n, pos + k)]
        d2 = _sq_dist(X, seed_rows, q)
        radius = np.sort(d2)[k - 1]
        # every row whose projected gap alone is within the k-th distance
        span = np.sqrt(radius) * (1 + 1e-9) + 1e-300
        lo = int(np.searchsorted(proj, qc - span, side="left"))
        hi = int(np.searchsorted(proj, qc + span, side="right"))
        lo = max(0, lo - 1)
        hi = min(n, hi + 1)
        gaps = proj[lo:hi] - qc
        cand = order[lo:hi][gaps * gaps <= radius]
        d2 = _sq_dist(X, cand, q)
        best = np.lexsort((cand, d2))[:k]
        s = 0.0
        for r in cand[best]:
            s += y[r]
        out[qi] = s / k
    return out
