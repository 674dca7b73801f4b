# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: regression-tree growth, tree evaluation, pruned k-NN.

Must stay result-identical to ``_kernels_py``; both walk the same node order,
draw features from the same splitmix64 stream and accumulate sums in the same
order.
"""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free, qsort
from libc.stdint cimport uint64_t, int64_t

cnp.import_array()

BACKEND = "compiled"


ctypedef struct Pair:
    double value
    int64_t row


cdef int _cmp_pair(const void* a, const void* b) noexcept nogil:
    cdef Pair* pa = <Pair*> a
    cdef Pair* pb = <Pair*> b
    if pa.value < pb.value:
        return -1
    if pa.value > pb.value:
        return 1
    if pa.row < pb.row:
        return -1
    if pa.row > pb.row:
        return 1
    return 0


cdef inline uint64_t _splitmix_next(uint64_t* state) noexcept nogil:
    cdef uint64_t z
    state[0] += <uint64_t> 0x9E3779B97F4A7C15ULL
    z = state[0]
    z = (z ^ (z >> 30)) * <uint64_t> 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t> 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def build_tree(const double[:, ::1] X, const double[::1] y, const int64_t[::1] sample_idx,
               int min_leaf, int max_depth, int mtry, uint64_t seed):
    """Grow one regression tree on the rows ``sample_idx`` of ``X``.

    Returns ``(feature, threshold, left, right, value)`` node arrays; leaves have
    ``feature == -1``.
    """
    cdef Py_ssize_t n = sample_idx.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef Py_ssize_t cap = 2 * n + 1
    cdef int64_t[::1] feature = np.full(cap, -1, dtype=np.int64)
    cdef double[::1] threshold = np.zeros(cap)
    cdef int64_t[::1] left = np.full(cap, -1, dtype=np.int64)
    cdef int64_t[::1] right = np.full(cap, -1, dtype=np.int64)
    cdef double[::1] value = np.zeros(cap)
    cdef int64_t[::1] idx = np.array(np.asarray(sample_idx), dtype=np.int64)
    cdef int64_t[::1] tmp = np.empty(max(n, 1), dtype=np.int64)
    cdef int64_t[::1] perm = np.empty(max(p, 1), dtype=np.int64)
    # stack entries: node, start, end, depth
    cdef int64_t[:, ::1] stack = np.empty((cap, 4), dtype=np.int64)
    cdef Pair* pairs = <Pair*> malloc(max(n, 1) * sizeof(Pair))
    cdef double* ysorted = <double*> malloc(max(n, 1) * sizeof(double))
    if pairs == NULL or ysorted == NULL:
        free(pairs)
        free(ysorted)
        raise MemoryError()

    cdef uint64_t rng = seed
    cdef Py_ssize_t top = 0, n_nodes = 1
    cdef int64_t node, start, end, depth, m, i, j, f, pos, r, nl_count, nr_pos, t
    cdef double total, mean, ymin, ymax, yv, xmin, xmax, cl, tot, sl, sr, gain
    cdef double parent, best_gain, best_thr, a, b, mid
    cdef int64_t best_f, evaluated, ii

    try:
        with nogil:
            stack[0, 0] = 0
            stack[0, 1] = 0
            stack[0, 2] = n
            stack[0, 3] = 0
            top = 1
            while top > 0:
                top -= 1
                node = stack[top, 0]
                start = stack[top, 1]
                end = stack[top, 2]
                depth = stack[top, 3]
                m = end - start

                total = 0.0
                ymin = y[idx[start]]
                ymax = ymin
                for i in range(start, end):
                    yv = y[idx[i]]
                    total += yv
                    if yv < ymin:
                        ymin = yv
                    if yv > ymax:
                        ymax = yv
                mean = total / m
                value[node] = min(max(mean, ymin), ymax)
                if m < 2 * min_leaf or ymin == ymax or (max_depth >= 0 and depth >= max_depth):
                    continue

                for i in range(p):
                    perm[i] = i
                best_gain = 0.0
                best_f = -1
                best_thr = 0.0
                evaluated = 0
                ii = 0
                while ii < p and evaluated < mtry:
                    j = ii + <int64_t> (_splitmix_next(&rng) % <uint64_t> (p - ii))
                    t = perm[ii]
                    perm[ii] = perm[j]
                    perm[j] = t
                    f = perm[ii]
                    ii += 1

                    xmin = X[idx[start], f]
                    xmax = xmin
                    for i in range(start, end):
                        a = X[idx[i], f]
                        if a < xmin:
                            xmin = a
                        if a > xmax:
                            xmax = a
                    if xmin == xmax:
                        continue
                    evaluated += 1

                    for i in range(m):
                        r = idx[start + i]
                        pairs[i].value = X[r, f]
                        pairs[i].row = r
                    qsort(pairs, m, sizeof(Pair), _cmp_pair)
                    cl = 0.0
                    for i in range(m):
                        ysorted[i] = y[pairs[i].row] - mean
                    # total of the centred labels in this feature's order
                    tot = 0.0
                    for i in range(m):
                        tot += ysorted[i]
                    parent = tot * tot / m
                    cl = 0.0
                    for pos in range(m - 1):
                        cl += ysorted[pos]
                        if pos < min_leaf - 1 or pos > m - min_leaf - 1:
                            continue
                        if pairs[pos].value == pairs[pos + 1].value:
                            continue
                        sl = cl
                        sr = tot - sl
                        gain = sl * sl / (pos + 1) + sr * sr / (m - pos - 1) - parent
                        if gain > best_gain:
                            best_gain = gain
                            best_f = f
                            a = pairs[pos].value
                            b = pairs[pos + 1].value
                            mid = (a + b) / 2.0
                            best_thr = a if mid >= b else mid

                if best_f < 0:
                    continue

                # stable partition of idx[start:end]
                nl_count = 0
                for i in range(start, end):
                    if X[idx[i], best_f] <= best_thr:
                        nl_count += 1
                nr_pos = nl_count
                j = 0
                for i in range(start, end):
                    r = idx[i]
                    if X[r, best_f] <= best_thr:
                        tmp[j] = r
                        j += 1
                    else:
                        tmp[nr_pos] = r
                        nr_pos += 1
                for i in range(m):
                    idx[start + i] = tmp[i]

                feature[node] = best_f
                threshold[node] = best_thr
                left[node] = n_nodes
                right[node] = n_nodes + 1
                n_nodes += 2
                # right pushed first so the left child is grown first
                stack[top, 0] = right[node]
                stack[top, 1] = start + nl_count
                stack[top, 2] = end
                stack[top, 3] = depth + 1
                top += 1
                stack[top, 0] = left[node]
                stack[top, 1] = start
                stack[top, 2] = start + nl_count
                stack[top, 3] = depth + 1
                top += 1
    finally:
        free(pairs)
        free(ysorted)

    k = n_nodes
    return (np.asarray(feature[:k]).copy(), np.asarray(threshold[:k]).copy(),
            np.asarray(left[:k]).copy(), np.asarray(right[:k]).copy(),
            np.asarray(value[:k]).copy())


def predict_tree(const double[:, ::1] X, const int64_t[::1] feature, const double[::1] threshold,
                 const int64_t[::1] left, const int64_t[::1] right, const double[::1] value):
    cdef Py_ssize_t n = X.shape[0], i
    cdef int64_t node
    cdef double[::1] out = np.empty(n)
    with nogil:
        for i in range(n):
            node = 0
            while feature[node] >= 0:
                if X[i, feature[node]] <= threshold[node]:
                    node = left[node]
                else:
                    node = right[node]
            out[i] = value[node]
    return np.asarray(out)


cdef inline bint _before(double d1, int64_t r1, double d2, int64_t r2) noexcept nogil:
    return d1 < d2 or (d1 == d2 and r1 < r2)


def knn_predict(const double[:, ::1] X, const double[::1] y, const double[:, ::1] Q, int k,
                Py_ssize_t col, const int64_t[::1] order, const double[::1] proj):
    """Mean label of the ``k`` nearest training rows for each query row.

    Rows are ranked by (squared distance, row index). The search walks outward
    from the query's position in ``proj`` (column ``col`` sorted by ``order``)
    and stops once the projected gap alone exceeds the current k-th distance.
    """
    cdef Py_ssize_t n = X.shape[0], p = X.shape[1], m = Q.shape[0]
    cdef double[::1] out = np.empty(m)
    cdef double* bd = <double*> malloc(k * sizeof(double))
    cdef int64_t* br = <int64_t*> malloc(k * sizeof(int64_t))
    cdef Py_ssize_t qi, lo, hi, mid, j, cnt, slot
    cdef int64_t r
    cdef double qc, dlo, dhi, gap, d2, diff, s
    cdef bint take_lo
    if bd == NULL or br == NULL:
        free(bd)
        free(br)
        raise MemoryError()
    try:
        with nogil:
            for qi in range(m):
                qc = Q[qi, col]
                # first position with proj >= qc
                lo = 0
                hi = n
                while lo < hi:
                    mid = (lo + hi) // 2
                    if proj[mid] < qc:
                        lo = mid + 1
                    else:
                        hi = mid
                hi = lo
                lo = lo - 1
                cnt = 0
                while lo >= 0 or hi < n:
                    if lo >= 0:
                        dlo = qc - proj[lo]
                        dlo = dlo * dlo
                    if hi < n:
                        dhi = proj[hi] - qc
                        dhi = dhi * dhi
                    if lo < 0:
                        take_lo = False
                    elif hi >= n:
                        take_lo = True
                    else:
                        take_lo = dlo <= dhi
                    gap = dlo if take_lo else dhi
                    if cnt == k and gap > bd[k - 1]:
                        break
                    if take_lo:
                        r = order[lo]
                        lo -= 1
                    else:
                        r = order[hi]
                        hi += 1
                    d2 = 0.0
                    for j in range(p):
                        diff = X[r, j] - Q[qi, j]
                        d2 += diff * diff
                    if cnt < k:
                        slot = cnt
                        cnt += 1
                    elif _before(d2, r, bd[k - 1], br[k - 1]):
                        slot = k - 1
                    else:
                        continue
                    while slot > 0 and _before(d2, r, bd[slot - 1], br[slot - 1]):
                        bd[slot] = bd[slot - 1]
                        br[slot] = br[slot - 1]
                        slot -= 1
                    bd[slot] = d2
                    br[slot] = r
                s = 0.0
                for j in range(k):
                    s += y[br[j]]
                out[qi] = s / k
    finally:
        free(bd)
        free(br)
    return np.asarray(out)
