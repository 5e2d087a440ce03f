"""Spherical k-means on anomalous embeddings and Davies-Bouldin model selection.

Cluster ids are 0-based. Embeddings are first shifted into the nonnegative
orthant with per-dimension minima taken from the training set; that shift is
stored in the model and reused for every later assignment, which keeps all
cosine distances in [0, 1].
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

DB_INF = float("inf")


def shift_nonnegative(z) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=np.float64)
    shift = z.min(axis=0)
    return z - shift, shift


def _unit_rows(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    return x / np.where(norms > 0, norms, 1.0), zero


def _quantize_unit(c) -> np.ndarray:
    """Round to float32 storage, then renormalize in float64 (exactly reproducible on load)."""
    c32 = np.asarray(c, dtype=np.float32).astype(np.float64)
    return c32 / np.linalg.norm(c32, axis=1, keepdims=True)


@dataclass
class ClusterModel:
    kind = "cluster"

    centroids: np.ndarray
    shift: np.ndarray
    objective: float = np.nan
    labels: np.ndarray | None = None
    traces: list = field(default_factory=list)  # per-restart objective per iteration

    @property
    def C(self) -> int:
        return len(self.centroids)

    def prepare(self, z) -> tuple[np.ndarray, np.ndarray]:
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.centroids.shape[1]:
            raise ShapeError(f"expected {self.centroids.shape[1]}-d embeddings")
        return _unit_rows(z - self.shift)

    def assign(self, z) -> np.ndarray:
        """Index of the most cosine-similar centroid; ties go to the smallest index."""
        single = np.asarray(z).ndim == 1
        u, zero = self.prepare(np.atleast_2d(z))
        if zero.any():
            warnings.warn(f"{int(zero.sum())} embeddings are zero after the shift; assigned to cluster 0",
                          stacklevel=2)
        out = np.argmax(u @ self.centroids.T, axis=1)
        out[zero] = 0
        return out[0] if single else out

    def to_arrays(self):
        meta = {"objective": float(self.objective)}
        return meta, {"centroids": self.centroids, "shift": self.shift}

    @classmethod
    def from_arrays(cls, meta, arrays):
        c = arrays["centroids"].astype(np.float64)
        return cls(c / np.linalg.norm(c, axis=1, keepdims=True), arrays["shift"].astype(np.float64),
                   meta.get("objective", np.nan))


def _kmeanspp(u: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    n = len(u)
    idx = [int(rng.integers(n))]
    dist = 1.0 - u @ u[idx[0]]
    for _ in range(1, C):
        p = np.clip(dist, 0, None) ** 2
        total = p.sum()
        nxt = int(rng.choice(n, p=p / total)) if total > 0 else int(rng.integers(n))
        idx.append(nxt)
        dist = np.minimum(dist, 1.0 - u @ u[nxt])
    return u[idx].copy()


def _lloyd(u: np.ndarray, valid: np.ndarray, cent: np.ndarray, max_iter: int):
    trace = []
    labels = None
    for _ in range(max_iter):
        sims = u @ cent.T
        new = np.argmax(sims, axis=1)
        best = sims[np.arange(len(u)), new]
        trace.append(float(np.sum(1.0 - best[valid])))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        sums = np.zeros_like(cent)
        np.add.at(sums, labels[valid], u[valid])
        counts = np.bincount(labels[valid], minlength=len(cent))
        for j in np.nonzero(counts == 0)[0]:
            # empty cluster: re-seed from the point farthest from its centroid
            far = np.where(valid, 1.0 - best, -np.inf)
            k = int(np.argmax(far))
            sums[j] = u[k]
            best[k] = 1.0
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        cent = np.where(norms > 0, sums / np.where(norms > 0, norms, 1), cent)
    return cent, trace


def fit_spherical_kmeans(zp, C: int, seed: int = 0, n_restarts: int = 10, max_iter: int = 100,
                         shift=None) -> ClusterModel:
    """Best of ``n_restarts`` k-means++-seeded runs; objective = sum(1 - cos)."""
    zp = np.asarray(zp, dtype=np.float64)
    if C < 1 or C > len(zp):
        raise ValueError(f"C={C} outside [1, {len(zp)}]")
    u, zero = _unit_rows(zp)
    valid = ~zero
    if valid.sum() < C:
        raise ValueError("fewer nonzero directions than clusters")
    rng = np.random.default_rng(seed)
    best = None
    traces = []
    for _ in range(n_restarts):
        init = _kmeanspp(u[valid], C, rng)
        cent, trace = _lloyd(u, valid, init, max_iter)
        traces.append(trace)
        if best is None or trace[-1] < best[1]:
            best = (cent, trace[-1])
    cent = _quantize_unit(best[0])
    sims = u @ cent.T
    labels = np.argmax(sims, axis=1)
    labels[zero] = 0
    objective = float(np.sum(1.0 - sims[np.arange(len(u)), labels][valid]))
    shift = np.zeros(zp.shape[1]) if shift is None else np.asarray(shift, dtype=np.float64)
    # the shift is stored in float32 in the container; keep the in-memory copy identical
    shift = shift.astype(np.float32).astype(np.float64)
    return ClusterModel(cent, shift, objective, labels, traces)


def db_index(model: ClusterModel, zp, labels=None) -> float:
    """Davies-Bouldin index under cosine distance; ``zp`` is already shifted."""
    u, zero = _unit_rows(zp)
    if labels is None:
        labels = np.argmax(u @ model.centroids.T, axis=1)
        labels[zero] = 0
    C = model.C
    counts = np.bincount(labels, minlength=C)
    if (counts == 0).any():
        raise ValueError("every cluster must have members to compute the DB index")
    dist = 1.0 - np.sum(u * model.centroids[labels], axis=1)
    spread = np.bincount(labels, dist, minlength=C) / counts
    sep = 1.0 - model.centroids @ model.centroids.T
    worst = np.empty(C)
    for i in range(C):
        ratios = []
        for j in range(C):
            if j == i:
                continue
            if sep[i, j] <= 1e-12:
                return DB_INF
            ratios.append((spread[i] + spread[j]) / sep[i, j])
        worst[i] = max(ratios)
    return float(worst.mean())


def select_C(zp, C_range=range(2, 31), seed: int = 0, n_restarts: int = 10, shift=None):
    """Fit every C in range and keep the model with the smallest DB index.

    Returns ``(best_model, [(C, db), ...])``.
    """
    zp = np.asarray(zp, dtype=np.float64)
    cs = [c for c in C_range if 2 <= c <= len(zp) - 1] or [min(C_range)]
    curve, best = [], None
    for c in cs:
        m = fit_spherical_kmeans(zp, c, seed=seed, n_restarts=n_restarts, shift=shift)
        try:
            db = db_index(m, zp, m.labels)
        except ValueError:
            db = DB_INF
        curve.append((c, db))
        if best is None or db < best[1]:
            best = (m, db)
    return best[0], curve


def centroid_correspondence(a: ClusterModel, b: ClusterModel) -> np.ndarray:
    """Cosine distance between every centroid of ``a`` (rows) and ``b`` (columns)."""
    if a.centroids.shape[1] != b.centroids.shape[1]:
        raise ShapeError("centroid dimensions differ")
    return 1.0 - a.centroids @ b.centroids.T
