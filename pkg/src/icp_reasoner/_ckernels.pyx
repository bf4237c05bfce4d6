# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def nearest_neighbors(src, tgt, src_mask, tgt_mask):
    cdef const double[:, ::1] s = np.ascontiguousarray(src, dtype=np.float64)
    cdef const double[:, ::1] t = np.ascontiguousarray(tgt, dtype=np.float64)
    cdef const cnp.uint8_t[::1] sm = np.ascontiguousarray(src_mask, dtype=np.uint8)
    cdef const cnp.uint8_t[::1] tm = np.ascontiguousarray(tgt_mask, dtype=np.uint8)
    cdef Py_ssize_t n = s.shape[0], m = t.shape[0], i, j, arg
    cdef double dx, dy, dz, sq, best
    index_arr = np.full(n, -1, dtype=np.int64)
    dist_arr = np.zeros(n, dtype=np.float64)
    cdef cnp.int64_t[::1] index = index_arr
    cdef double[::1] dist = dist_arr
    for i in range(n):
        if not sm[i]:
            continue
        best = INFINITY
        arg = 0
        for j in range(m):
            if not tm[j]:
                continue
            dx = s[i, 0] - t[j, 0]
            dy = s[i, 1] - t[j, 1]
            dz = s[i, 2] - t[j, 2]
            sq = dx * dx + dy * dy
            sq = sq + dz * dz
            if sq < best:
                best = sq
                arg = j
        index[i] = arg
        dist[i] = best
    return index_arr, dist_arr


def max_argmax(x):
    cdef const double[:, :, ::1] v = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t a = v.shape[0], k = v.shape[1], b = v.shape[2], p, q, r
    vals_arr = np.empty((a, b), dtype=np.float64)
    idx_arr = np.zeros((a, b), dtype=np.int64)
    cdef double[:, ::1] vals = vals_arr
    cdef cnp.int64_t[:, ::1] idx = idx_arr
    cdef double cur
    for p in range(a):
        for r in range(b):
            vals[p, r] = v[p, 0, r]
        for q in range(1, k):
            for r in range(b):
                cur = v[p, q, r]
                # NaN propagates like numpy.argmax: first NaN wins
                if cur > vals[p, r] or (cur != cur and vals[p, r] == vals[p, r]):
                    vals[p, r] = cur
                    idx[p, r] = q
    return vals_arr, idx_arr


def scatter_argmax(grad, idx, Py_ssize_t k):
    cdef const double[:, ::1] g = np.ascontiguousarray(grad, dtype=np.float64)
    cdef const cnp.int64_t[:, ::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef Py_ssize_t a = g.shape[0], b = g.shape[1], p, r
    out_arr = np.zeros((a, k, b), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for p in range(a):
        for r in range(b):
            out[p, ix[p, r], r] = g[p, r]
    return out_arr
