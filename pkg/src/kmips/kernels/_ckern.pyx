# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled scoring/selection kernels.

Same contract as _npkern: float32 rows, float64 query, float64 left-to-right
accumulation, selection ties to the lower row index. Top-k uses a bounded
heap whose root is the worst kept candidate, so a single pass over the rows
suffices and no length-n temporary is sorted.
"""
import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef inline bint _worse(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib) nogil:
    # (sa, ia) ranks strictly below (sb, ib): lower score, or same score and
    # higher index.
    if sa != sb:
        return sa < sb
    return ia > ib


cdef void _sift_down(double* hs, Py_ssize_t* hi, Py_ssize_t k, Py_ssize_t root) nogil:
    cdef Py_ssize_t child, worst
    cdef double ts
    cdef Py_ssize_t ti
    while True:
        child = 2 * root + 1
        if child >= k:
            return
        worst = root
        if _worse(hs[child], hi[child], hs[worst], hi[worst]):
            worst = child
        if child + 1 < k and _worse(hs[child + 1], hi[child + 1], hs[worst], hi[worst]):
            worst = child + 1
        if worst == root:
            return
        ts = hs[root]; ti = hi[root]
        hs[root] = hs[worst]; hi[root] = hi[worst]
        hs[worst] = ts; hi[worst] = ti
        root = worst


cdef void _heap_select(const double* s, Py_ssize_t n, Py_ssize_t k,
                       double* hs, Py_ssize_t* hi) nogil:
    cdef Py_ssize_t i
    for i in range(k):
        hs[i] = s[i]
        hi[i] = i
    for i in range(k // 2 - 1, -1, -1):
        _sift_down(hs, hi, k, i)
    for i in range(k, n):
        if _worse(hs[0], hi[0], s[i], i):
            hs[0] = s[i]
            hi[0] = i
            _sift_down(hs, hi, k, 0)


cdef void _heap_sort_desc(double* hs, Py_ssize_t* hi, Py_ssize_t k) nogil:
    # Pop worst-first into the tail, leaving best-first order in place.
    cdef Py_ssize_t end, ti
    cdef double ts
    for end in range(k - 1, 0, -1):
        ts = hs[0]; ti = hi[0]
        hs[0] = hs[end]; hi[0] = hi[end]
        hs[end] = ts; hi[end] = ti
        _sift_down(hs, hi, end, 0)


def scores(const float[:, ::1] mem, const double[::1] q):
    """Inner product of every row with q, left-to-right float64 accumulation."""
    cdef Py_ssize_t n = mem.shape[0]
    cdef Py_ssize_t d = mem.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += mem[i, j] * q[j]
            o[i] = acc
    return out


def subset_scores(const float[:, ::1] mem, const double[::1] q, const long long[::1] idx):
    """Inner products for the listed rows, in idx order."""
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t d = mem.shape[1]
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i, j, r
    cdef double acc
    with nogil:
        for i in range(m):
            r = <Py_ssize_t>idx[i]
            acc = 0.0
            for j in range(d):
                acc += mem[r, j] * q[j]
            o[i] = acc
    return out


def topk_from_scores(const double[::1] s, Py_ssize_t k):
    """Indices of the k largest scores, descending, ties to the lower index."""
    cdef Py_ssize_t n = s.shape[0]
    hs_arr = np.empty(k, dtype=np.float64)
    hi_arr = np.empty(k, dtype=np.intp)
    cdef double[::1] hs = hs_arr
    cdef Py_ssize_t[::1] hi = hi_arr
    with nogil:
        _heap_select(&s[0], n, k, &hs[0], &hi[0])
        _heap_sort_desc(&hs[0], &hi[0], k)
    return hi_arr.astype(np.int64, copy=False)


def exact_topk(const float[:, ::1] mem, const double[::1] q, Py_ssize_t k):
    """Fused score-all + top-k: one pass over the rows, no length-n buffer."""
    cdef Py_ssize_t n = mem.shape[0]
    cdef Py_ssize_t d = mem.shape[1]
    hs_arr = np.empty(k, dtype=np.float64)
    hi_arr = np.empty(k, dtype=np.intp)
    cdef double[::1] hs = hs_arr
    cdef Py_ssize_t[::1] hi = hi_arr
    cdef Py_ssize_t i, j
    cdef double acc
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(d):
                acc += mem[i, j] * q[j]
            if i < k:
                hs[i] = acc
                hi[i] = i
                if i == k - 1:
                    for j in range(k // 2 - 1, -1, -1):
                        _sift_down(&hs[0], &hi[0], k, j)
            elif _worse(hs[0], hi[0], acc, i):
                hs[0] = acc
                hi[0] = i
                _sift_down(&hs[0], &hi[0], k, 0)
        _heap_sort_desc(&hs[0], &hi[0], k)
    return hi_arr.astype(np.int64, copy=False), hs_arr


def assign_rows(const float[:, ::1] x, const float[:, ::1] centroids):
    """Max-inner-product centroid per row, ties to the lower centroid index."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t c = centroids.shape[0]
    out = np.empty(n, dtype=np.int64)
    cdef long long[::1] o = out
    cdef Py_ssize_t i, j, r, best
    cdef double acc, best_s
    with nogil:
        for i in range(n):
            best = 0
            best_s = 0.0
            for r in range(c):
                acc = 0.0
                for j in range(d):
                    acc += x[i, j] * centroids[r, j]
                if r == 0 or acc > best_s:
                    best = r
                    best_s = acc
            o[i] = best
    return out
