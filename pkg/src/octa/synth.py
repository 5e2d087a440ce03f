"""Layered retina phantoms with exact surfaces and anomaly masks.

The three anomaly kinds stand in for hyperreflective foci (``bright-blob``),
intraretinal fluid (``dark-fluid``) and drusen elevating the RPE
(``drusen-bump``). Class presets ``healthy``/``early``/``late`` mix them so that
early and late volumes carry comparable total anomaly load but different kinds.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .io import (
    AnnotationMask,
    DatasetManifest,
    ManifestEntry,
    OctVolume,
    save_mask,
    save_surfaces_csv,
    save_volume,
    write_manifest,
)
from .preprocess import LayerSurfaces

KINDS = ("bright-blob", "dark-fluid", "drusen-bump")
RECIPE_THICKNESS = 44.0  # retina thickness and B-scan width the preset
RECIPE_WIDTH = 128       # recipe areas were drawn for
LEGEND = {0: "normal", 1: "bright-blob", 2: "dark-fluid", 3: "drusen-bump"}
KIND_LABEL = {k: i + 1 for i, k in enumerate(KINDS)}


@dataclass(frozen=True)
class AnomalyRecipe:
    kind: str
    size_range: tuple = (50, 200)  # pixel area per anomaly
    count_range: tuple = (1, 1)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown anomaly kind {self.kind!r}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ValidationError("size_range must be positive and ordered")
        if not 0 <= self.count_range[0] <= self.count_range[1]:
            raise ValidationError("count_range must be non-negative and ordered")


@dataclass(frozen=True)
class PhantomConfig:
    # retina about three patch heights thick, close to the patch-to-retina
    # ratio of clinical scans; thinner retinas drown anomalies in patch context
    width: int = 192
    height: int = 160
    n_bscans: int = 4
    ilm_row: float = 35.0
    thickness: float = 96.0
    surface_amplitude: float = 4.0
    max_tilt: float = 0.10  # BM rows per column
    smoothness: int = 2
    # (fraction of retinal thickness, intensity) top to bottom
    layers: tuple = ((0.15, 0.72), (0.35, 0.45), (0.36, 0.2), (0.14, 0.95))
    vitreous: float = 0.05
    choroid: float = 0.12
    speckle_shape: float = 8.0  # gamma shape; 0 disables speckle
    anomalies: tuple = ()
    label: str = "healthy"
    seed: int = 0
    spacing: tuple = (11.0, 4.0, 120.0)

    def __post_init__(self):
        if min(self.width, self.height, self.n_bscans) <= 0:
            raise ValidationError("phantom sizes must be positive")
        if self.label == "healthy" and self.anomalies:
            raise ValidationError("healthy phantoms cannot carry anomaly recipes")
        if abs(sum(f for f, _ in self.layers) - 1.0) > 1e-9:
            raise ValidationError("layer fractions must sum to 1")


# Anomaly recipes per class, with areas quoted for a 44-px thick, 128-px wide retina.
CLASS_RECIPES = {
    "healthy": (),
    "early": (
        AnomalyRecipe("drusen-bump", (60, 180), (6, 10)),
        AnomalyRecipe("dark-fluid", (40, 90), (8, 16)),
        AnomalyRecipe("bright-blob", (8, 20), (0, 2)),
    ),
    "late": (
        AnomalyRecipe("dark-fluid", (300, 800), (1, 3)),
        AnomalyRecipe("bright-blob", (10, 30), (3, 6)),
    ),
}


def class_config(label: str, base: PhantomConfig | None = None, **overrides) -> PhantomConfig:
    """Preset anomaly recipes for the three phantom classes.

    Areas are quoted for a 44-px thick, 128-px wide retina and scale with the
    retinal cross-section, so larger phantoms keep the same anomaly load.
    """
    base = base or PhantomConfig()
    recipes = CLASS_RECIPES
    if label not in recipes:
        raise ValidationError(f"unknown phantom class {label!r}")
    k = (base.thickness / RECIPE_THICKNESS) * (base.width / RECIPE_WIDTH)
    scaled = tuple(replace(r, size_range=(int(round(r.size_range[0] * k)), int(round(r.size_range[1] * k))))
                   for r in recipes[label])
    return replace(base, label=label, anomalies=scaled, **overrides)


@dataclass
class Phantom:
    volume: OctVolume
    surfaces: list = field(default_factory=list)
    mask: AnnotationMask | None = None
    label: str = "healthy"
    intensity: np.ndarray | None = None  # noiseless float rendering


DRUSEN_FILL = 0.30  # sub-RPE deposit intensity
WAVE_FREQS = (0.5, 1.0, 1.7)  # cycles per B-scan width


def _smooth_curve(rng, width, mean, amplitude, tilt, smoothness):
    c = np.arange(width)
    curve = np.full(width, float(mean)) + tilt * (c - width / 2)
    for f in WAVE_FREQS:
        curve += amplitude / f * rng.uniform(0.2, 1.0) * np.sin(
            2 * np.pi * f * c / width + rng.uniform(0, 2 * np.pi))
    rows = np.rint(curve).astype(np.int64)
    # enforce the per-column smoothness bound exactly
    for i in range(1, width):
        rows[i] = np.clip(rows[i], rows[i - 1] - smoothness, rows[i - 1] + smoothness)
    return rows


def _render_layers(cfg: PhantomConfig, ilm, bm, rpe_top=None):
    h, w = cfg.height, cfg.width
    rows = np.arange(h)[:, None].astype(np.float64)
    img = np.full((h, w), cfg.vitreous)
    t = (bm - ilm).astype(np.float64)
    u = (rows - ilm[None, :]) / t[None, :]
    inside = (rows >= ilm[None, :]) & (rows < bm[None, :])
    edges = np.cumsum([0.0] + [f for f, _ in cfg.layers])
    for k, (_, val) in enumerate(cfg.layers):
        sel = inside & (u >= edges[k]) & (u < edges[k + 1])
        img[sel] = val
    below = rows >= bm[None, :]
    img[below] = cfg.choroid
    return img


def _ellipse(h, w, cy, cx, ry, rx):
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    return ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0


def _place_ellipse(rng, cfg, ilm, bm, area, margin_top, margin_bottom, occupied):
    h, w = cfg.height, cfg.width
    for _ in range(200):
        aspect = rng.uniform(1.2, 2.5)  # wider than tall
        ry = max(1.0, np.sqrt(area / (np.pi * aspect)))
        rx = ry * aspect
        cx = rng.uniform(rx + 1, w - rx - 1) if w > 2 * rx + 2 else None
        if cx is None:
            continue
        c0, c1 = int(np.floor(cx - rx)), int(np.ceil(cx + rx)) + 1
        top = ilm[c0:c1].max() + margin_top
        bottom = bm[c0:c1].min() - margin_bottom
        if bottom - top < 2 * ry + 1:
            continue
        cy = rng.uniform(top + ry, bottom - ry)
        m = _ellipse(h, w, cy, cx, ry, rx)
        if (m & occupied).any():
            continue
        return m
    return None


def _drusen_profile(rng, cfg, bm, area, occupied):
    w = cfg.width
    for _ in range(200):
        height = rng.uniform(6.0, 10.0) * cfg.thickness / RECIPE_THICKNESS
        half = area * 3 / (4 * height)  # area of a parabolic dome = 4/3 * half * height
        if half < 2 or 2 * half + 2 >= w:
            continue
        c0 = rng.uniform(half + 1, w - half - 1)
        c = np.arange(w)
        elev = np.rint(np.clip(height * (1 - ((c - c0) / half) ** 2), 0, None)).astype(np.int64)
        if elev.sum() == 0:
            continue
        rows = np.arange(cfg.height)[:, None]
        m = (rows >= (bm - elev)[None, :]) & (rows < bm[None, :])
        if (m & occupied).any():
            continue
        return elev, m
    return None


def generate_volume(config: PhantomConfig) -> Phantom:
    rng = np.random.default_rng(config.seed)
    cfg = config
    h, w = cfg.height, cfg.width
    # worst-case excursion of the summed sinusoids plus tilt, for BM and for ILM
    wobble = cfg.surface_amplitude * sum(1 / f for f in WAVE_FREQS)
    drift = wobble + cfg.max_tilt * w / 2
    if cfg.ilm_row - drift - wobble / 2 < 1 or cfg.ilm_row + cfg.thickness + drift >= h - 2:
        raise ValidationError("retina does not fit the B-scan with these geometry settings")

    tilt = rng.uniform(-cfg.max_tilt, cfg.max_tilt)
    scans, surfaces, masks, clean = [], [], [], []
    recipes = []
    for recipe in cfg.anomalies:
        n = int(rng.integers(recipe.count_range[0], recipe.count_range[1] + 1))
        recipes += [recipe] * n
    # spread anomalies evenly over the slices, starting at a random slice
    start = int(rng.integers(0, cfg.n_bscans))
    plan = [(r, (start + i) % cfg.n_bscans) for i, r in enumerate(recipes)]

    for s in range(cfg.n_bscans):
        bm = _smooth_curve(rng, w, cfg.ilm_row + cfg.thickness, cfg.surface_amplitude,
                           tilt, max(1, cfg.smoothness - 1))
        thick = _smooth_curve(rng, w, cfg.thickness, cfg.surface_amplitude / 2, 0.0, 1)
        # both curves move <= 1 px/column, so ILM moves <= 2 px/column
        ilm = bm - np.clip(thick, 12, None)
        try:
            LayerSurfaces(ilm, bm).validate(h, cfg.smoothness)
        except Exception as exc:
            raise ValidationError(f"phantom surfaces do not fit the B-scan: {exc}") from exc
        img = _render_layers(cfg, ilm, bm)
        labels = np.zeros((h, w), dtype=np.uint8)
        occupied = np.zeros((h, w), dtype=bool)
        rpe_frac = cfg.layers[-1][0]

        for recipe, where in plan:
            if where != s:
                continue
            lo, hi = recipe.size_range
            for _attempt in range(20):
                area = rng.uniform(lo, hi)
                if recipe.kind == "drusen-bump":
                    got = _drusen_profile(rng, cfg, bm, area, occupied)
                    m = None if got is None else got[1]
                else:
                    mb = int(np.ceil(rpe_frac * (bm - ilm).max())) + 2
                    m = _place_ellipse(rng, cfg, ilm, bm, area, 2, mb, occupied)
                    got = m
                if got is not None and lo <= m.sum() <= hi:
                    break
            else:
                raise ValidationError(f"{recipe.kind} of size {recipe.size_range} does not fit the retina")
            if recipe.kind == "drusen-bump":
                elev, m = got
                # lift the bottom band (RPE) and everything above it inside the dome
                lifted = _render_layers(cfg, ilm - 0, bm - elev)
                cols = elev > 0
                rows = np.arange(h)[:, None]
                keep = (rows >= ilm[None, :]) & (rows < (bm - elev)[None, :]) & cols[None, :] & ~occupied
                img[keep] = lifted[keep]
                img[m] = DRUSEN_FILL
                # Bruch's membrane stays in place as a thin bright line under the dome
                membrane = m & (rows >= (bm - 2)[None, :])
                img[membrane] = 0.9
                m = m & ~membrane
            elif recipe.kind == "dark-fluid":
                img[m] = 0.03
            else:
                img[m] = 1.0
            labels[m] = KIND_LABEL[recipe.kind]
            occupied |= m

        clean.append(img)
        if cfg.speckle_shape > 0:
            img = img * rng.gamma(cfg.speckle_shape, 1.0 / cfg.speckle_shape, size=img.shape)
        scans.append(np.clip(np.rint(img * 200.0), 0, 255).astype(np.uint8))
        surfaces.append(LayerSurfaces(ilm, bm))
        masks.append(labels)

    vol_id = f"{cfg.label}-{cfg.seed}"
    volume = OctVolume(tuple(scans), cfg.spacing, vol_id)
    mask = AnnotationMask(np.stack(masks), LEGEND)
    return Phantom(volume, surfaces, mask, cfg.label, np.stack(clean))


def generate_dataset(out_dir, plan, base: PhantomConfig | None = None, seed: int = 0) -> DatasetManifest:
    """Write phantoms plus a manifest.

    ``plan`` is either ``{label: count}`` (all tagged ``test``) or an iterable of
    ``(label, split, count)`` triples.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(plan, dict):
        plan = [(label, "test", n) for label, n in plan.items()]
    entries = []
    index = 0
    for label, split, count in plan:
        if count < 1:
            raise ValidationError(f"count for {label!r} must be >= 1")
        for _ in range(count):
            vseed = int(np.random.SeedSequence([seed, index]).generate_state(1)[0])
            cfg = class_config(label, base, seed=vseed)
            ph = generate_volume(cfg)
            name = f"{index:04d}_{label}"
            vol_dir = out / "volumes" / name
            save_volume(ph.volume, vol_dir)
            save_mask(ph.mask, out / "masks" / name)
            save_surfaces_csv(vol_dir / "surfaces.csv",
                              {i: (s.ilm, s.bm) for i, s in enumerate(ph.surfaces)})
            entries.append(ManifestEntry(f"volumes/{name}", label, f"masks/{name}", split))
            index += 1
    manifest = DatasetManifest(entries, out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
