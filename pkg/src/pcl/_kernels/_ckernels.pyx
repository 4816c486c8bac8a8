# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot loops in :mod:`pcl._kernels._pykernels`.

Both modules expose the same functions. Centroid sums use the same sequential
accumulation order in both, so they agree bit-for-bit.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, lgamma, log

cnp.import_array()


def centroid_sums(const double[:, ::1] x, const cnp.int64_t[::1] labels, Py_ssize_t k):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j, c
    sums_arr = np.zeros((k, d), dtype=np.float64)
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    for i in range(n):
        c = labels[i]
        if c < 0 or c >= k:
            raise ValueError(f"label {c} out of range for k={k}")
        counts[c] += 1
        for j in range(d):
            sums[c, j] += x[i, j]
    return sums_arr, counts_arr


def expected_mutual_info(const cnp.int64_t[::1] a_sums, const cnp.int64_t[::1] b_sums, cnp.int64_t n):
    cdef Py_ssize_t i, j
    cdef cnp.int64_t ai, bj, nij, lo, hi
    cdef double emi = 0.0, log_n = log(<double>n), lg_n = lgamma(n + 1.0)
    cdef double fixed, gln, term
    for i in range(a_sums.shape[0]):
        ai = a_sums[i]
        for j in range(b_sums.shape[0]):
            bj = b_sums[j]
            lo = ai + bj - n
            if lo < 1:
                lo = 1
            hi = ai if ai < bj else bj
            fixed = (lgamma(ai + 1.0) + lgamma(bj + 1.0) + lgamma(n - ai + 1.0)
                     + lgamma(n - bj + 1.0) - lg_n)
            for nij in range(lo, hi + 1):
                term = (<double>nij / n) * (log_n + log(<double>nij) - log(<double>ai) - log(<double>bj))
                gln = (fixed - lgamma(nij + 1.0) - lgamma(ai - nij + 1.0)
                       - lgamma(bj - nij + 1.0) - lgamma(n - ai - bj + nij + 1.0))
                emi += term * exp(gln)
    return emi


def ross_counts(const double[:, ::1] x, const cnp.int64_t[::1] labels, Py_ssize_t k):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j, t, pos
    cdef double s, diff, radius
    cdef cnp.int64_t count
    dist_arr = np.empty(n, dtype=np.float64)
    best_arr = np.empty(k, dtype=np.float64)
    m_arr = np.empty(n, dtype=np.int64)
    cdef double[::1] dist = dist_arr
    cdef double[::1] best = best_arr
    cdef cnp.int64_t[::1] m = m_arr
    cdef Py_ssize_t filled
    for i in range(n):
        filled = 0
        for j in range(n):
            s = 0.0
            for t in range(d):
                diff = x[i, t] - x[j, t]
                s += diff * diff
            dist[j] = s
            if j == i or labels[j] != labels[i]:
                continue
            # keep the k smallest same-class squared distances, sorted ascending
            if filled < k:
                pos = filled
                filled += 1
            elif s < best[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and best[pos - 1] > s:
                best[pos] = best[pos - 1]
                pos -= 1
            best[pos] = s
        if filled < k:
            raise ValueError("class has too few members for the neighbor count")
        radius = best[k - 1]
        count = 0
        for j in range(n):
            if j != i and dist[j] <= radius:
                count += 1
        m[i] = count
    return m_arr
