"""B-scan geometry and intensity normalization, plus superpixel over-segmentation.

Pipeline per B-scan: find ILM/BM surfaces, normalize intensities to [0, 1],
flatten so that BM is horizontal, then split the retina (rows ``ilm <= r < bm``)
into ~4x4 superpixels.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, SegmentationFailure, ShapeError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LayerSurfaces:
    """Per-column ILM and BM rows. The retina occupies ``ilm[c] <= r < bm[c]``."""

    ilm: np.ndarray
    bm: np.ndarray

    def __post_init__(self):
        ilm = np.asarray(self.ilm, dtype=np.int64)
        bm = np.asarray(self.bm, dtype=np.int64)
        if ilm.shape != bm.shape or ilm.ndim != 1:
            raise ShapeError("ilm and bm must be 1-D and equally long")
        object.__setattr__(self, "ilm", ilm)
        object.__setattr__(self, "bm", bm)

    @property
    def width(self) -> int:
        return len(self.ilm)

    def validate(self, height: int, smoothness: int | None = 2) -> None:
        if np.any(self.ilm < 0) or np.any(self.ilm >= self.bm) or np.any(self.bm >= height):
            raise SegmentationFailure("surfaces violate 0 <= ilm < bm < height")
        if smoothness is not None and self.width > 1:
            if np.abs(np.diff(self.ilm)).max() > smoothness or np.abs(np.diff(self.bm)).max() > smoothness:
                raise SegmentationFailure(f"surface jumps exceed {smoothness} px/column")

    def region(self, height: int) -> np.ndarray:
        """Boolean mask of retinal pixels."""
        rows = np.arange(height)[:, None]
        return (rows >= self.ilm[None, :]) & (rows < self.bm[None, :])

    def mirrored(self) -> "LayerSurfaces":
        return LayerSurfaces(self.ilm[::-1].copy(), self.bm[::-1].copy())


@dataclass(frozen=True)
class NormalizedBScan:
    pixels: np.ndarray
    volume_id: str = ""
    slice_index: int = -1

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.size and (px.min() < 0 or px.max() > 1):
            raise ValueError("normalized pixels must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)


@dataclass(frozen=True)
class SuperpixelMap:
    """``labels`` holds ids 0..K-1 inside the retina and -1 elsewhere."""

    labels: np.ndarray
    centers: np.ndarray

    @property
    def n_superpixels(self) -> int:
        return len(self.centers)

    def sizes(self) -> np.ndarray:
        lab = self.labels[self.labels >= 0]
        return np.bincount(lab, minlength=self.n_superpixels)

    def broadcast(self, values: np.ndarray, fill=0) -> np.ndarray:
        """Paint one value per superpixel onto its member pixels."""
        values = np.asarray(values)
        out = np.full(self.labels.shape, fill, dtype=values.dtype)
        inside = self.labels >= 0
        out[inside] = values[self.labels[inside]]
        return out


# --------------------------------------------------------------------------
# surfaces


def _dp_path(cost: np.ndarray, smoothness: int) -> np.ndarray:
    """Minimum-cost left-to-right path with |row step| <= smoothness."""
    h, w = cost.shape
    offsets = [0]
    for k in range(1, smoothness + 1):
        offsets += [-k, k]
    acc = np.empty_like(cost)
    back = np.zeros((h, w), dtype=np.int64)
    acc[:, 0] = cost[:, 0]
    rows = np.arange(h)
    for c in range(1, w):
        prev = acc[:, c - 1]
        cand = np.full((len(offsets), h), np.inf)
        for i, k in enumerate(offsets):
            src = rows + k
            ok = (src >= 0) & (src < h)
            cand[i, ok] = prev[src[ok]]
        choice = np.argmin(cand, axis=0)
        acc[:, c] = cost[:, c] + cand[choice, rows]
        back[:, c] = rows + np.asarray(offsets)[choice]
    path = np.empty(w, dtype=np.int64)
    if not np.isfinite(acc[:, -1]).any():
        raise SegmentationFailure("no feasible monotone-smooth surface")
    path[-1] = int(np.argmin(acc[:, -1]))
    for c in range(w - 1, 0, -1):
        path[c - 1] = back[path[c], c]
    return path


def find_surfaces(bscan: np.ndarray, smoothness: int = 2, sigma: float = 1.0,
                  min_gap: int = 2) -> LayerSurfaces:
    """Locate ILM and BM by dynamic programming on the vertical gradient.

    BM is the strongest bright-to-dark transition (looking down), ILM the
    strongest dark-to-bright transition above BM with a dark region above it.
    """
    img = np.asarray(bscan, dtype=np.float64)
    h, w = img.shape
    span = img.max() - img.min()
    if span <= 0:
        raise SegmentationFailure("constant image carries no gradient evidence")
    img = (img - img.min()) / span
    sm = ndimage.gaussian_filter(img, sigma) if sigma > 0 else img
    # d[r] = sm[r] - sm[r-1]; a step from dark to bright at row r peaks at d[r]
    d = np.zeros_like(sm)
    d[1:] = sm[1:] - sm[:-1]
    if np.abs(d).max() < 1e-9:
        raise SegmentationFailure("no gradient evidence")

    rows = np.arange(h)[:, None]
    # slight preference for lower rows so ties resolve towards the bottom
    bm_cost = d - 1e-6 * rows / h
    bm_cost[: min_gap + 1] = np.inf
    bm = _dp_path(bm_cost, smoothness)

    csum = np.cumsum(sm, axis=0)
    mean_above = np.zeros_like(sm)
    mean_above[1:] = csum[:-1] / np.arange(1, h)[:, None]
    ilm_cost = -d + mean_above + 1e-6 * rows / h
    ilm_cost[rows > (bm[None, :] - min_gap)] = np.inf
    ilm_cost[0] = np.inf
    ilm = _dp_path(ilm_cost, smoothness)

    surf = LayerSurfaces(ilm, bm)
    surf.validate(h, smoothness)
    return surf


# --------------------------------------------------------------------------
# flattening


def column_shifts(surfaces: LayerSurfaces) -> np.ndarray:
    """Downward shift per column that brings BM to the deepest BM row."""
    return surfaces.bm.max() - surfaces.bm


def shift_columns(image: np.ndarray, shifts: np.ndarray, fill=0) -> np.ndarray:
    image = np.asarray(image)
    h, w = image.shape
    out = np.full_like(image, fill)
    for c in np.nonzero(shifts)[0]:
        s = int(shifts[c])
        if s < h:
            out[s:, c] = image[: h - s, c]
    same = shifts == 0
    out[:, same] = image[:, same]
    return out


def flatten(bscan, surfaces: LayerSurfaces):
    """Shift every column down so BM lands on a common row (the max BM row).

    Accepts a raw array or a :class:`NormalizedBScan` and returns the same kind.
    """
    shifts = column_shifts(surfaces)
    if isinstance(bscan, NormalizedBScan):
        return NormalizedBScan(shift_columns(bscan.pixels, shifts), bscan.volume_id, bscan.slice_index)
    return shift_columns(bscan, shifts)


def flatten_surfaces(surfaces: LayerSurfaces) -> LayerSurfaces:
    shifts = column_shifts(surfaces)
    return LayerSurfaces(surfaces.ilm + shifts, surfaces.bm + shifts)


# --------------------------------------------------------------------------
# normalization


def normalize(bscan, low: float = 1.0, high: float = 99.0, volume_id: str = "",
              slice_index: int = -1) -> NormalizedBScan:
    """Clip to the [p_low, p_high] percentile window and map it affinely onto [0, 1]."""
    x = np.asarray(bscan, dtype=np.float64)
    lo, hi = np.percentile(x, [low, high])
    if not hi > lo:
        raise DegenerateInputError("percentile window is empty (constant image?)")
    out = np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return NormalizedBScan(out, volume_id, slice_index)


# --------------------------------------------------------------------------
# superpixels


def _relabel(labels: np.ndarray) -> np.ndarray:
    inside = labels >= 0
    uniq, inv = np.unique(labels[inside], return_inverse=True)
    out = np.full(labels.shape, -1, dtype=np.int64)
    out[inside] = inv
    return out


def _merge_small(labels: np.ndarray, min_size: int) -> np.ndarray:
    sizes = np.bincount(labels[labels >= 0])
    small = np.nonzero((sizes > 0) & (sizes < min_size))[0]
    if len(small) == 0:
        return labels
    labels = labels.copy()
    h, w = labels.shape
    for lab in small:
        rr, cc = np.nonzero(labels == lab)
        target = -1
        for r, c in zip(rr, cc):
            for dr, dc in ((0, -1), (0, 1), (-1, 0), (1, 0)):
                r2, c2 = r + dr, c + dc
                if 0 <= r2 < h and 0 <= c2 < w and labels[r2, c2] >= 0 and labels[r2, c2] != lab:
                    target = labels[r2, c2]
                    break
            if target >= 0:
                break
        if target >= 0:
            labels[rr, cc] = target
    return labels


def _centers(labels: np.ndarray, k: int) -> np.ndarray:
    """Per superpixel, the member pixel closest to the centroid."""
    rr, cc = np.nonzero(labels >= 0)
    lab = labels[rr, cc]
    n = np.bincount(lab, minlength=k)
    cr = np.bincount(lab, rr, minlength=k) / n
    ccn = np.bincount(lab, cc, minlength=k) / n
    dist = (rr - cr[lab]) ** 2 + (cc - ccn[lab]) ** 2
    order = np.lexsort((cc, rr, dist, lab))
    first = np.ones(len(order), dtype=bool)
    first[1:] = lab[order][1:] != lab[order][:-1]
    pick = order[first]
    return np.stack([rr[pick], cc[pick]], axis=1)


def oversegment(bscan: NormalizedBScan, surfaces: LayerSurfaces, mode: str = "slic",
                step: int = 4, iterations: int = 5, compactness: float = 0.5,
                min_size: int = 4) -> SuperpixelMap:
    """Split the retina into superpixels seeded on a ``step`` x ``step`` grid.

    ``mode="grid"`` returns the exact block partition; ``mode="slic"`` refines it
    with a SLIC loop using distance ``|dI| + compactness * (spatial / step)``.
    """
    img = np.asarray(bscan.pixels if isinstance(bscan, NormalizedBScan) else bscan, dtype=np.float64)
    h, w = img.shape
    if surfaces.width != w:
        raise ShapeError("surfaces do not match B-scan width")
    region = surfaces.region(h)
    if np.any(surfaces.bm - surfaces.ilm < step):
        warnings.warn("retina thinner than one superpixel step; thin columns merged into neighbours",
                      stacklevel=2)

    rr, cc = np.nonzero(region)
    nbr, nbc = -(-h // step), -(-w // step)
    block = (rr // step) * nbc + (cc // step)
    labels = np.full((h, w), -1, dtype=np.int64)
    labels[rr, cc] = block

    if mode == "slic" and len(rr):
        labels = _slic(img, rr, cc, block, nbr, nbc, step, iterations, compactness, labels)
    elif mode != "grid":
        raise ValueError(f"unknown superpixel mode {mode!r}")

    labels = _relabel(labels)
    labels = _relabel(_merge_small(labels, min_size))
    k = int(labels.max()) + 1 if (labels >= 0).any() else 0
    return SuperpixelMap(labels, _centers(labels, k) if k else np.zeros((0, 2), dtype=np.int64))


def _slic(img, rr, cc, block, nbr, nbc, step, iterations, compactness, labels):
    nblocks = nbr * nbc
    lab = block.copy()
    vals = img[rr, cc]
    # candidate centers: the 3x3 neighbourhood of each pixel's seed block
    br, bc = rr // step, cc // step
    cand = []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r2, c2 = br + dr, bc + dc
            ok = (r2 >= 0) & (r2 < nbr) & (c2 >= 0) & (c2 < nbc)
            cand.append(np.where(ok, r2 * nbc + c2, -1))
    cand = np.stack(cand, axis=1)
    for _ in range(iterations):
        n = np.bincount(lab, minlength=nblocks).astype(np.float64)
        alive = n > 0
        safe = np.where(alive, n, 1.0)
        cr = np.bincount(lab, rr, minlength=nblocks) / safe
        ccn = np.bincount(lab, cc, minlength=nblocks) / safe
        ci = np.bincount(lab, vals, minlength=nblocks) / safe
        valid = (cand >= 0) & alive[np.maximum(cand, 0)]
        k = np.maximum(cand, 0)
        dr = rr[:, None] - cr[k]
        dc = cc[:, None] - ccn[k]
        valid &= (np.abs(dr) <= step) & (np.abs(dc) <= step)
        dist = np.abs(vals[:, None] - ci[k]) + compactness * np.sqrt(dr ** 2 + dc ** 2) / step
        dist[~valid] = np.inf
        best = np.argmin(dist, axis=1)
        has = np.isfinite(dist[np.arange(len(lab)), best])
        new = np.where(has, k[np.arange(len(lab)), best], lab)
        if np.array_equal(new, lab):
            break
        lab = new
    out = labels.copy()
    out[rr, cc] = lab
    return out


# --------------------------------------------------------------------------
# whole-B-scan convenience


@dataclass(frozen=True)
class PreprocessedBScan:
    """A normalized, flattened B-scan with its flattened surfaces and superpixels."""

    image: NormalizedBScan
    surfaces: LayerSurfaces
    superpixels: SuperpixelMap
    shifts: np.ndarray

    def region(self) -> np.ndarray:
        return self.surfaces.region(self.image.pixels.shape[0])


def preprocess_bscan(raw: np.ndarray, surfaces: LayerSurfaces | None = None, mode: str = "slic",
                     volume_id: str = "", slice_index: int = -1) -> PreprocessedBScan:
    if surfaces is None:
        surfaces = find_surfaces(raw)
    else:
        surfaces.validate(np.asarray(raw).shape[0], smoothness=None)
    norm = normalize(raw, volume_id=volume_id, slice_index=slice_index)
    flat = flatten(norm, surfaces)
    fsurf = flatten_surfaces(surfaces)
    sp = oversegment(flat, fsurf, mode=mode)
    return PreprocessedBScan(flat, fsurf, sp, column_shifts(surfaces))
