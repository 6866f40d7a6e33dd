# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled greedy caliper matching on whitened coordinates."""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, INFINITY

cnp.import_array()


def greedy_match(const double[:, ::1] ct_w, const double[:, ::1] pool_w,
                 const double[::1] ct_logit, const double[::1] pool_logit,
                 const cnp.int64_t[::1] order, double caliper):
    """Greedy 1:1 matching without replacement.

    Rows of ``ct_w`` and ``pool_w`` are whitened covariates, so squared
    Euclidean distance equals squared Mahalanobis distance. Pool rows must
    be sorted by school id: strict ``<`` keeps the earliest row on ties.

    Returns (match index or -1, distance, candidates within caliper), all
    indexed by CT row.
    """
    cdef Py_ssize_t n_ct = ct_w.shape[0], n_pool = pool_w.shape[0], d = ct_w.shape[1]
    cdef Py_ssize_t t, i, j, k, best
    cdef double s, diff, bestd
    cdef long count
    match_arr = np.full(n_ct, -1, dtype=np.int64)
    dist_arr = np.full(n_ct, np.nan)
    cand_arr = np.zeros(n_ct, dtype=np.int64)
    used_arr = np.zeros(n_pool, dtype=np.uint8)
    cdef cnp.int64_t[::1] match = match_arr
    cdef double[::1] dist = dist_arr
    cdef cnp.int64_t[::1] cand = cand_arr
    cdef cnp.uint8_t[::1] used = used_arr
    with nogil:
        for t in range(n_ct):
            i = order[t]
            best = -1
            bestd = INFINITY
            count = 0
            for j in range(n_pool):
                if used[j] or fabs(ct_logit[i] - pool_logit[j]) > caliper:
                    continue
                count += 1
                s = 0.0
                for k in range(d):
                    diff = ct_w[i, k] - pool_w[j, k]
                    s += diff * diff
                if s < bestd:
                    bestd = s
                    best = j
            cand[i] = count
            if best >= 0:
                used[best] = 1
                match[i] = best
                dist[i] = sqrt(bestd)
    return match_arr, dist_arr, cand_arr
