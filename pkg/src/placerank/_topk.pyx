# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Bounded-heap row-wise top-k selection.

Order is by score (descending unless ``ascending``), ties broken by lower
column index. Matches a stable full sort exactly.
"""
import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef fused real:
    float
    double


cdef inline bint _worse(double sa, Py_ssize_t ia, double sb, Py_ssize_t ib, bint asc) noexcept nogil:
    # True if (sa, ia) ranks after (sb, ib)
    if sa == sb:
        return ia > ib
    if asc:
        return sa > sb
    return sa < sb


cdef void _sift_down(double* hs, Py_ssize_t* hi, Py_ssize_t n, Py_ssize_t pos, bint asc) noexcept nogil:
    # heap root holds the worst kept element
    cdef Py_ssize_t child, worst
    cdef double ts
    cdef Py_ssize_t ti
    while True:
        child = 2 * pos + 1
        if child >= n:
            break
        worst = child
        if child + 1 < n and _worse(hs[child + 1], hi[child + 1], hs[child], hi[child], asc):
            worst = child + 1
        if _worse(hs[worst], hi[worst], hs[pos], hi[pos], asc):
            ts = hs[pos]; hs[pos] = hs[worst]; hs[worst] = ts
            ti = hi[pos]; hi[pos] = hi[worst]; hi[worst] = ti
            pos = worst
        else:
            break


cdef void _row_topk(real* row, Py_ssize_t n, Py_ssize_t k, bint asc,
                    double* hs, Py_ssize_t* hi, cnp.int64_t* out) noexcept nogil:
    cdef Py_ssize_t j, m, pos
    cdef double s, ts
    cdef Py_ssize_t ti
    for j in range(k):
        hs[j] = row[j]
        hi[j] = j
    for pos in range(k // 2 - 1, -1, -1):
        _sift_down(hs, hi, k, pos, asc)
    for j in range(k, n):
        s = row[j]
        # j is larger than every kept index, so it only wins on a strict improvement
        if (asc and s < hs[0]) or ((not asc) and s > hs[0]):
            hs[0] = s
            hi[0] = j
            _sift_down(hs, hi, k, 0, asc)
    # pop worst-first into the tail
    m = k
    while m > 0:
        out[m - 1] = hi[0]
        m -= 1
        hs[0] = hs[m]; hi[0] = hi[m]
        _sift_down(hs, hi, m, 0, asc)


def topk_rows(real[:, ::1] scores, Py_ssize_t k, bint ascending=False):
    cdef Py_ssize_t b = scores.shape[0]
    cdef Py_ssize_t n = scores.shape[1]
    if k > n:
        k = n
    out = np.empty((b, k), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] ov = out
    if k == 0 or b == 0:
        return out
    cdef double* hs = <double*> malloc(k * sizeof(double))
    cdef Py_ssize_t* hi = <Py_ssize_t*> malloc(k * sizeof(Py_ssize_t))
    if hs == NULL or hi == NULL:
        free(hs); free(hi)
        raise MemoryError()
    cdef Py_ssize_t r
    try:
        with nogil:
            for r in range(b):
                _row_topk(&scores[r, 0], n, k, ascending, hs, hi, &ov[r, 0])
    finally:
        free(hs)
        free(hi)
    return out
