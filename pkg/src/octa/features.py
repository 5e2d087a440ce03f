"""Multi-scale patches at superpixel centers and their embeddings."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError

SMALL = (32, 32)    # rows x cols
LARGE = (32, 128)   # 32 tall, 128 wide, then 4x1 horizontal box average
FACTOR = 4


@dataclass(frozen=True)
class PatchPair:
    small: np.ndarray
    large_ds: np.ndarray
    center: tuple
    source: tuple = ("", -1)


def _windows(image: np.ndarray, centers: np.ndarray, shape) -> np.ndarray:
    ph, pw = shape
    top, left = ph // 2, pw // 2
    padded = np.pad(image, ((top, ph - top), (left, pw - left)), mode="symmetric")
    view = sliding_window_view(padded, shape)
    # window anchored at (r - top, c - left) in image coords == (r, c) in padded coords
    return view[centers[:, 0], centers[:, 1]]


def extract_patch_pairs(image, centers) -> tuple[np.ndarray, np.ndarray]:
    """Row-major flattened (small, downsampled large) patches, one row per center."""
    img = np.asarray(getattr(image, "pixels", image), dtype=np.float32)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    if len(centers) == 0:
        d = SMALL[0] * SMALL[1]
        return np.zeros((0, d), np.float32), np.zeros((0, d), np.float32)
    small = _windows(img, centers, SMALL).reshape(len(centers), -1)
    large = _windows(img, centers, LARGE)
    large = large.reshape(len(centers), LARGE[0], LARGE[1] // FACTOR, FACTOR).mean(axis=3, dtype=np.float64)
    return np.ascontiguousarray(small), large.reshape(len(centers), -1).astype(np.float32)


def extract_patch_pair(image, center, source=("", -1)) -> PatchPair:
    s, l = extract_patch_pairs(image, [center])
    return PatchPair(s[0].reshape(SMALL), l[0].reshape(SMALL), tuple(int(v) for v in center), source)


def embed_dataset(encoder, small, large, chunk: int = 4096) -> np.ndarray:
    """Embed row-aligned patch matrices with any encoder exposing ``encode(small, large)``."""
    small = np.asarray(small, dtype=np.float32)
    large = np.asarray(large, dtype=np.float32)
    if small.ndim != 2 or large.shape != small.shape:
        raise ShapeError(f"malformed patches: {small.shape} vs {large.shape}")
    parts = [encoder.encode(small[i:i + chunk], large[i:i + chunk]) for i in range(0, len(small), chunk)]
    if not parts:
        return np.zeros((0, encoder.code_dim), dtype=np.float32)
    return np.concatenate(parts).astype(np.float32, copy=False)


class PcaModel:
    """Per-scale PCA; ``mode`` is ``"fixed-128"`` or ``"variance-0.95"``."""

    kind = "pca"

    def __init__(self, means, components, eigenvalues, mode: str):
        self.means = [np.asarray(m, dtype=np.float32) for m in means]
        self.components = [np.asarray(c, dtype=np.float32) for c in components]
        self.eigenvalues = [np.asarray(e, dtype=np.float32) for e in eigenvalues]
        self.mode = mode

    @property
    def code_dim(self) -> int:
        return sum(len(c) for c in self.components)

    def project(self, scale: int, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float32)
        return (x - self.means[scale]) @ self.components[scale].T

    def reconstruct(self, scale: int, y) -> np.ndarray:
        return np.asarray(y, dtype=np.float32) @ self.components[scale] + self.means[scale]

    def encode(self, small, large) -> np.ndarray:
        return np.concatenate([self.project(0, small), self.project(1, large)], axis=-1)

    def to_arrays(self):
        arrays = {}
        for i, (m, c, e) in enumerate(zip(self.means, self.components, self.eigenvalues)):
            arrays[f"mean{i}"], arrays[f"components{i}"], arrays[f"eigenvalues{i}"] = m, c, e
        return {"mode": self.mode, "n_scales": len(self.means)}, arrays

    @classmethod
    def from_arrays(cls, meta, arrays):
        n = meta["n_scales"]
        return cls([arrays[f"mean{i}"] for i in range(n)], [arrays[f"components{i}"] for i in range(n)],
                   [arrays[f"eigenvalues{i}"] for i in range(n)], meta["mode"])


def _pca_one(x: np.ndarray, mode: str, n_fixed: int, variance: float):
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < d:
        warnings.warn(f"PCA fit on {n} samples in {d} dims is rank-deficient", stacklevel=3)
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0, None)
    evecs = evecs[:, order].T
    if mode == "fixed-128":
        k = n_fixed
        if k > d:
            warnings.warn(f"only {d} dims available, padding to {k} with zero components", stacklevel=3)
            evecs = np.vstack([evecs, np.zeros((k - d, d))])
            evals = np.concatenate([evals, np.zeros(k - d)])
        elif evals[k - 1] <= 1e-12 * max(evals[0], 1e-300):
            warnings.warn("data rank below 128; trailing components carry zero variance", stacklevel=3)
    elif mode == "variance-0.95":
        total = evals.sum()
        frac = np.cumsum(evals) / total if total > 0 else np.ones(d)
        k = int(np.searchsorted(frac, variance - 1e-12) + 1)
    else:
        raise ValueError(f"unknown PCA mode {mode!r}")
    return mean, evecs[:k], evals[:k]


def pca_fit(scales, mode: str = "fixed-128", n_fixed: int = 128, variance: float = 0.95) -> PcaModel:
    """Fit one PCA per scale; ``scales`` is a sequence of sample matrices."""
    parts = [_pca_one(x, mode, n_fixed, variance) for x in scales]
    return PcaModel([p[0] for p in parts], [p[1] for p in parts], [p[2] for p in parts], mode)


def pca_embed(model: PcaModel, pair: PatchPair) -> np.ndarray:
    return model.encode(pair.small.reshape(1, -1), pair.large_ds.reshape(1, -1))[0]
