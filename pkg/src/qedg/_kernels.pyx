# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops.  Must agree bit-for-bit with ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def confusion_matrix(const cnp.int64_t[:] a, const cnp.int64_t[:] b, Py_ssize_t k):
    cdef Py_ssize_t n = a.shape[0], i
    cdef cnp.int64_t ai, bi
    if b.shape[0] != n:
        raise ValueError("prediction vectors differ in length")
    out = np.zeros((k, k), dtype=np.int64)
    cdef cnp.int64_t[:, :] m = out
    for i in range(n):
        ai = a[i]
        bi = b[i]
        if ai < 0 or ai >= k or bi < 0 or bi >= k:
            raise ValueError(f"label out of range [0, {k})")
        m[ai, bi] += 1
    return out


def majority_vote_rows(const cnp.int64_t[:, :] labels, Py_ssize_t k):
    cdef Py_ssize_t n = labels.shape[0], r = labels.shape[1], i, j, best
    cdef cnp.int64_t lab
    out = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[:] res = out
    counts_arr = np.zeros(k, dtype=np.int64)
    cdef cnp.int64_t[:] counts = counts_arr
    for i in range(n):
        for j in range(k):
            counts[j] = 0
        for j in range(r):
            lab = labels[i, j]
            if lab < 0 or lab >= k:
                raise ValueError(f"label out of range [0, {k})")
            counts[lab] += 1
        best = 0
        for j in range(1, k):
            if counts[j] > counts[best]:
                best = j
        res[i] = best
    return out


def noisy_threshold_search(const double[:] thetas, const cnp.uint8_t[:, :, :] flips):
    cdef Py_ssize_t n = thetas.shape[0], q = flips.shape[1], r = flips.shape[2]
    cdef Py_ssize_t i, s, j
    cdef double lo, hi, mid
    cdef int truth, ones
    if flips.shape[0] != n:
        raise ValueError("flips must have one row per threshold")
    out = np.empty(n, dtype=np.float64)
    cdef double[:] est = out
    for i in range(n):
        lo = 0.0
        hi = 1.0
        for s in range(q):
            mid = 0.5 * (lo + hi)
            truth = 1 if mid >= thetas[i] else 0
            ones = 0
            for j in range(r):
                ones += truth ^ flips[i, s, j]
            if ones > r - ones:
                hi = mid
            else:
                lo = mid
        est[i] = 0.5 * (lo + hi)
    return out


def rotate_nearest(const float[:, :, :] images, const double[:] cosines, const double[:] sines):
    cdef Py_ssize_t n = images.shape[0], h = images.shape[1], w = images.shape[2]
    cdef Py_ssize_t b, i, j, si, sj
    cdef double ci = 0.5 * (h - 1), cj = 0.5 * (w - 1), c, s, dy, dx, sy, sx
    out = np.zeros((n, h, w), dtype=np.float32)
    cdef float[:, :, :] res = out
    for b in range(n):
        c = cosines[b]
        s = sines[b]
        for i in range(h):
            dy = i - ci
            for j in range(w):
                dx = j - cj
                sy = c * dy + s * dx + ci
                sx = c * dx - s * dy + cj
                si = <Py_ssize_t>floor(sy + 0.5)
                sj = <Py_ssize_t>floor(sx + 0.5)
                if 0 <= si < h and 0 <= sj < w:
                    res[b, i, j] = images[b, si, sj]
    return out
