"""NumPy implementations of the compiled kernels.

Results are bit-identical to ``_kernels.pyx``; the test suite runs both.
"""
import numpy as np


def confusion_matrix(a, b, k):
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.shape != b.shape:
        raise ValueError("prediction vectors differ in length")
    if a.size and (a.min() < 0 or b.min() < 0 or a.max() >= k or b.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    return np.bincount(a * k + b, minlength=k * k).astype(np.int64).reshape(k, k)


def majority_vote_rows(labels, k):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    counts = np.zeros((labels.shape[0], k), dtype=np.int64)
    for j in range(k):
        counts[:, j] = (labels == j).sum(axis=1)
    # argmax returns the first maximum: lowest label wins ties
    return counts.argmax(axis=1).astype(np.int64)


def noisy_threshold_search(thetas, flips):
    thetas = np.asarray(thetas, dtype=np.float64)
    flips = np.asarray(flips, dtype=np.uint8)
    if flips.shape[0] != thetas.shape[0]:
        raise ValueError("flips must have one row per threshold")
    n, q, r = flips.shape
    lo = np.zeros(n)
    hi = np.ones(n)
    for s in range(q):
        mid = 0.5 * (lo + hi)
        truth = (mid >= thetas).astype(np.int64)
        ones = (truth[:, None] ^ flips[:, s, :]).sum(axis=1)
        upper = ones > r - ones
        hi = np.where(upper, mid, hi)
        lo = np.where(upper, lo, mid)
    return 0.5 * (lo + hi)


def rotate_nearest(images, cosines, sines):
    images = np.asarray(images, dtype=np.float32)
    n, h, w = images.shape
    ci, cj = 0.5 * (h - 1), 0.5 * (w - 1)
    dy = (np.arange(h, dtype=np.float64) - ci)[None, :, None]
    dx = (np.arange(w, dtype=np.float64) - cj)[None, None, :]
    c = np.asarray(cosines, dtype=np.float64)[:, None, None]
    s = np.asarray(sines, dtype=np.float64)[:, None, None]
    si = np.floor(c * dy + s * dx + ci + 0.5).astype(np.int64)
    sj = np.floor(c * dx - s * dy + cj + 0.5).astype(np.int64)
    valid = (si >= 0) & (si < h) & (sj >= 0) & (sj < w)
    out = np.zeros_like(images)
    b = np.broadcast_to(np.arange(n)[:, None, None], si.shape)
    out[valid] = images[b[valid], si[valid], sj[valid]]
    return out
