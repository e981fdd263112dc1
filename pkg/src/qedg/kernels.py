"""Hot-loop kernels with a compiled backend and a NumPy fallback.

The Cython extension ``qedg._kernels`` is used when it was built; otherwise
(or when ``QEDG_PURE_PYTHON=1``) the NumPy versions in ``_kernels_py`` are
selected.  ``BACKEND`` names the active implementation.
"""
import os

import numpy as np

from . import _kernels_py

_compiled = None
if not os.environ.get("QEDG_PURE_PYTHON"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

_impl = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def _bind(impl):
    """Typed entry points for one implementation (dtype coercion included)."""

    def confusion_matrix(a, b, k):
        return impl.confusion_matrix(
            np.ascontiguousarray(a, dtype=np.int64), np.ascontiguousarray(b, dtype=np.int64), int(k)
        )

    def majority_vote_rows(labels, k):
        labels = np.ascontiguousarray(labels, dtype=np.int64)
        if labels.ndim != 2 or labels.shape[1] == 0:
            raise ValueError("majority vote needs a non-empty 2-D label array")
        return impl.majority_vote_rows(labels, int(k))

    def noisy_threshold_search(thetas, flips):
        return impl.noisy_threshold_search(
            np.ascontiguousarray(thetas, dtype=np.float64), np.ascontiguousarray(flips, dtype=np.uint8)
        )

    def rotate_nearest(images, angles_deg):
        images = np.ascontiguousarray(images, dtype=np.float32)
        rad = np.deg2rad(np.asarray(angles_deg, dtype=np.float64).reshape(-1))
        if rad.shape[0] != images.shape[0]:
            raise ValueError("one angle per image required")
        return impl.rotate_nearest(images, np.cos(rad), np.sin(rad))

    return {
        "confusion_matrix": confusion_matrix,
        "majority_vote_rows": majority_vote_rows,
        "noisy_threshold_search": noisy_threshold_search,
        "rotate_nearest": rotate_nearest,
    }


_active = _bind(_impl)
confusion_matrix = _active["confusion_matrix"]
majority_vote_rows = _active["majority_vote_rows"]
noisy_threshold_search = _active["noisy_threshold_search"]
rotate_nearest = _active["rotate_nearest"]


def backends():
    """Entry points of every available implementation, keyed by backend name."""
    out = {"python": _bind(_kernels_py)}
    if _compiled is not None:
        out["cython"] = _bind(_compiled)
    return out
