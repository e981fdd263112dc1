"""Datasets: two moons, Gaussian blobs, IDX image files, synthetic glyphs.

2-D tasks are standardised with training-set statistics.  Image tasks are
scaled to [0, 1] and flattened row-major.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.datasets import make_blobs, make_moons

DTYPE = np.float32

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}


class MalformedDataset(ValueError):
    pass


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    num_classes: int
    low: np.ndarray
    high: np.ndarray
    image_shape: tuple[int, int] | None = None

    @property
    def input_dim(self) -> int:
        return int(self.x_train.shape[1])

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.low, self.high


def _standardised(name, x_tr, y_tr, x_te, y_te, k) -> Dataset:
    mu = x_tr.mean(axis=0)
    sd = x_tr.std(axis=0)
    x_tr = ((x_tr - mu) / sd).astype(DTYPE)
    x_te = ((x_te - mu) / sd).astype(DTYPE)
    return Dataset(
        name, x_tr, y_tr.astype(np.int64), x_te, y_te.astype(np.int64), k,
        x_tr.min(axis=0), x_tr.max(axis=0),
    )


def two_moons(n_train: int = 1000, n_test: int = 1000, noise: float = 0.1, seed: int = 3) -> Dataset:
    x, y = make_moons(n_samples=n_train + n_test, noise=noise, random_state=seed)
    return _standardised("two_moons", x[:n_train], y[:n_train], x[n_train:], y[n_train:], 2)


def blobs(num_classes: int = 3, spread: float = 1.0, n_train: int = 1000, n_test: int = 1000, seed: int = 3) -> Dataset:
    x, y = make_blobs(
        n_samples=n_train + n_test, centers=num_classes, cluster_std=spread, n_features=2, random_state=seed
    )
    return _standardised("blobs", x[:n_train], y[:n_train], x[n_train:], y[n_train:], num_classes)


# -- IDX -------------------------------------------------------------------------------


def read_idx(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MalformedDataset(f"missing IDX file: {path}") from None
    if len(raw) < 4:
        raise MalformedDataset(f"{path}: header truncated ({len(raw)} bytes)")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise MalformedDataset(f"{path}: bad IDX magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise MalformedDataset(f"{path}: dimension table truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise MalformedDataset(f"{path}: expected {expected} bytes for dims {dims}, found {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    for code, dt in _IDX_TYPES.items():
        if dt.newbyteorder("=") == arr.dtype.newbyteorder("="):
            break
    else:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    Path(path).write_bytes(header + arr.astype(dt).tobytes())


def _scale_images(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return (images.astype(np.float64) / 255.0).astype(DTYPE)
    images = images.astype(np.float64)
    lo, hi = images.min(), images.max()
    return ((images - lo) / (hi - lo if hi > lo else 1.0)).astype(DTYPE)


def load_idx_images(images_path, labels_path=None, test_fraction: float = 0.2, seed: int = 3) -> Dataset:
    images = read_idx(images_path)
    if images.ndim != 3:
        raise MalformedDataset(f"{images_path}: expected N x H x W images, got dims {images.shape}")
    n, h, w = images.shape
    x = _scale_images(images).reshape(n, h * w)
    if labels_path is None:
        y = np.zeros(n, dtype=np.int64)
    else:
        y = read_idx(labels_path).astype(np.int64).reshape(-1)
        if y.shape[0] != n:
            raise MalformedDataset(f"{labels_path}: {y.shape[0]} labels for {n} images")
    return _split_images("idx", x, y, (h, w), test_fraction, seed)


def _split_images(name, x, y, shape, test_fraction, seed) -> Dataset:
    order = np.random.default_rng(seed).permutation(len(y))
    n_test = int(round(len(y) * test_fraction))
    te, tr = order[:n_test], order[n_test:]
    k = max(int(y.max()) + 1, 2) if y.size else 2
    d = x.shape[1]
    return Dataset(
        name, x[tr], y[tr], x[te], y[te], k,
        np.zeros(d, dtype=DTYPE), np.ones(d, dtype=DTYPE), shape,
    )


# -- synthetic glyphs ----------------------------------------------------------------------

GLYPH_CLASSES = ("ring", "plus", "cross", "square")


def render_glyph(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """One glyph with random centre offset, extent and stroke width."""
    c = (size - 1) / 2 + rng.uniform(-1.0, 1.0, size=2)
    r = rng.uniform(0.28, 0.38) * size
    t = rng.uniform(0.7, 1.2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - c[0], xx - c[1]
    if kind == 0:
        dist = np.abs(np.hypot(dy, dx) - r)
    elif kind == 1:
        dist = np.where(np.maximum(np.abs(dy), np.abs(dx)) <= r, np.minimum(np.abs(dy), np.abs(dx)), np.inf)
    elif kind == 2:
        u, v = (dy + dx) / np.sqrt(2), (dy - dx) / np.sqrt(2)
        dist = np.where(np.maximum(np.abs(u), np.abs(v)) <= r, np.minimum(np.abs(u), np.abs(v)), np.inf)
    else:
        dist = np.abs(np.maximum(np.abs(dy), np.abs(dx)) - r * 0.85)
    img = np.clip(1.0 - (dist - t / 2), 0.0, 1.0)
    img += rng.normal(0.0, 0.05, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def glyphs(n_train: int = 2000, n_test: int = 500, size: int = 12, seed: int = 3) -> Dataset:
    """Grayscale surrogate for digit data: four stroke shapes, flip-symmetric by design."""
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    y = np.arange(n, dtype=np.int64) % len(GLYPH_CLASSES)
    rng.shuffle(y)
    x = np.stack([render_glyph(int(k), size, rng) for k in y]).reshape(n, size * size).astype(DTYPE)
    d = size * size
    return Dataset(
        "glyphs", x[:n_train], y[:n_train], x[n_train:], y[n_train:], len(GLYPH_CLASSES),
        np.zeros(d, dtype=DTYPE), np.ones(d, dtype=DTYPE), (size, size),
    )


def load_dataset(spec: dict) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "two_moons":
        return two_moons(spec["n_train"], spec["n_test"], spec["noise"], spec["seed"])
    if kind == "blobs":
        return blobs(spec["num_classes"], spec["spread"], spec["n_train"], spec["n_test"], spec["seed"])
    if kind == "idx":
        if not spec.get("images_path"):
            raise MalformedDataset("idx dataset needs images_path")
        return load_idx_images(spec["images_path"], spec.get("labels_path"), spec["test_fraction"], spec["seed"])
    if kind == "glyphs":
        return glyphs(spec["n_train"], spec["n_test"], spec["image_size"], spec["seed"])
    raise MalformedDataset(f"unknown dataset kind '{kind}'")


def probe_grid(ds: Dataset, resolution: int = 50) -> np.ndarray:
    """Uniform grid over the training bounding box (2-D tasks), else the test inputs."""
    if ds.input_dim != 2:
        return ds.x_test
    gx = np.linspace(ds.low[0], ds.high[0], resolution)
    gy = np.linspace(ds.low[1], ds.high[1], resolution)
    xx, yy = np.meshgrid(gx, gy)
    return np.stack([xx.ravel(), yy.ravel()], axis=1).astype(DTYPE)
