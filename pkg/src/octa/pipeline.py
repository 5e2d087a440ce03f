"""Pipeline stages operating on one run directory.

Layout under ``run_dir``::

    data/                 phantoms and manifest.csv (synth)
    prep/                 per-volume flattened images, superpixels, flattened masks
    models/               ddae_ent.octm, pca256.octm, loss traces
    svm/<method>/         one model per nu, sweep.csv, chosen.json
    segment/<method>/     per-volume superpixel labels and embeddings, overlays/
    categorize/           cluster.octm, db_curve.csv, maps/, overlays/
    classify/             importance and confusion CSVs, predictions.json
    eval/                 metrics.json, table.txt, pr_<method>.csv
    records/<stage>.json  config hash, seed, wall time, outputs

Each stage checks that the outputs it depends on exist, replaces only its
own directory, and holds a lockfile on the run directory while it works.
"""

from __future__ import annotations

import colorsys
import csv
import json
import logging
import shutil
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from .cluster import select_C, shift_nonnegative
from .config import PipelineConfig
from .errors import OctaError, PrerequisiteError, SegmentationFailure
from .evaluate import (
    METRICS,
    confusion,
    format_table,
    pr_area,
    pr_curve,
    roc_auc,
    seg_metrics,
    summarize,
    wilcoxon_signed_rank,
)
from .features import embed_dataset, extract_patch_pairs, pca_fit
from .forest import FeatureTable, cluster_volume_features, fit_forest, oob_accuracy, permutation_importance
from .io import (
    load_mask,
    load_model,
    load_surfaces_csv,
    load_volume,
    read_manifest,
    save_model,
    write_pgm,
    write_ppm,
)
from .neuralnet import TrainConfig, train_composite
from .ocsvm import sweep_nu
from .preprocess import LayerSurfaces, preprocess_bscan, shift_columns
from .synth import PhantomConfig, generate_dataset

log = logging.getLogger(__name__)

STAGES = ("synth", "preprocess", "train-features", "fit-svm", "segment", "categorize", "classify", "eval")
MODEL_FILES = {"ddae": "ddae_ent.octm", "pca256": "pca256.octm", "pca95": "pca95.octm"}
CLUSTER_METHOD = "ddae"


# --------------------------------------------------------------------------
# plumbing


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(str(path), stage)
    return path


def _fresh(path: Path) -> Path:
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_json(path: Path):
    return json.loads(path.read_text())


def _manifest_path(cfg: PipelineConfig) -> Path:
    return Path(cfg.manifest) if cfg.manifest else cfg.run_path / "data" / "manifest.csv"


def _manifest(cfg: PipelineConfig):
    return read_manifest(_require(_manifest_path(cfg), "synth"))


def _prep_index(cfg: PipelineConfig) -> list:
    return _read_json(_require(cfg.run_path / "prep" / "index.json", "preprocess"))


def _volumes(cfg: PipelineConfig, split=None) -> list:
    return [v for v in _prep_index(cfg) if v["status"] == "ok" and (split is None or v["split"] == split)]


@contextmanager
def _locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise OctaError(f"{run_dir} is locked by another pipeline run") from None
    try:
        yield
    finally:
        lock.release()


# --------------------------------------------------------------------------
# per-volume data


class PrepVolume:
    """Preprocessed volume loaded from ``prep/<name>.npz``."""

    def __init__(self, path: Path):
        with np.load(path) as f:
            self.images = f["images"]
            self.sp_labels = f["sp_labels"]
            self.centers = f["centers"]
            self.counts = f["counts"]
            self.shifts = f["shifts"]
            self.ilm = f["ilm"]
            self.bm = f["bm"]
            self.gt = f["gt"] if "gt" in f.files else None
            self.spacing = tuple(float(s) for s in f["spacing"])

    @property
    def n_slices(self) -> int:
        return len(self.images)

    def slice_centers(self, s: int) -> np.ndarray:
        start = int(self.counts[:s].sum())
        return self.centers[start:start + int(self.counts[s])]

    def roi(self) -> np.ndarray:
        h = self.images.shape[1]
        rows = np.arange(h)[None, :, None]
        return (rows >= self.ilm[:, None, :]) & (rows < self.bm[:, None, :])

    def paint(self, per_superpixel, fill=0) -> np.ndarray:
        """Broadcast superpixel values to pixels, slice by slice."""
        out = np.full(self.sp_labels.shape, fill, dtype=np.asarray(per_superpixel).dtype)
        start = 0
        for s in range(self.n_slices):
            vals = per_superpixel[start:start + int(self.counts[s])]
            lab = self.sp_labels[s]
            inside = lab >= 0
            out[s][inside] = vals[lab[inside]]
            start += int(self.counts[s])
        return out

    def patches(self) -> tuple[np.ndarray, np.ndarray]:
        parts = [extract_patch_pairs(self.images[s], self.slice_centers(s)) for s in range(self.n_slices)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _prep(cfg: PipelineConfig, name: str) -> PrepVolume:
    return PrepVolume(cfg.run_path / "prep" / f"{name}.npz")


def _preprocess_volume(entry, manifest, cfg: PipelineConfig, out: Path) -> None:
    vol_dir = manifest.resolve(entry.volume)
    vol = load_volume(vol_dir)
    given = load_surfaces_csv(vol_dir / "surfaces.csv") if cfg.surfaces == "given" else None
    mask = load_mask(manifest.resolve(entry.mask)) if entry.mask else None
    keys = ("images", "sp_labels", "centers", "counts", "shifts", "ilm", "bm", "gt")
    acc = {k: [] for k in keys}
    for s, raw in enumerate(vol.bscans):
        surf = LayerSurfaces(*given[s]) if given is not None else None
        p = preprocess_bscan(raw, surf, mode=cfg.superpixels, volume_id=vol.id, slice_index=s)
        acc["images"].append(p.image.pixels)
        acc["sp_labels"].append(p.superpixels.labels.astype(np.int32))
        acc["centers"].append(p.superpixels.centers.astype(np.int32))
        acc["counts"].append(p.superpixels.n_superpixels)
        acc["shifts"].append(p.shifts)
        acc["ilm"].append(p.surfaces.ilm)
        acc["bm"].append(p.surfaces.bm)
        if mask is not None:
            labels = mask.labels if mask.labels.ndim == 3 else mask.labels[None]
            acc["gt"].append(shift_columns(labels[s], p.shifts))
    arrays = {k: np.stack(v) for k, v in acc.items() if k not in ("centers", "counts", "gt")}
    arrays["centers"] = np.concatenate(acc["centers"])
    arrays["counts"] = np.asarray(acc["counts"], dtype=np.int64)
    if mask is not None:
        arrays["gt"] = np.stack(acc["gt"]).astype(np.uint8)
    arrays["spacing"] = np.asarray(vol.spacing, dtype=np.float64)
    np.savez(out, **arrays)


# --------------------------------------------------------------------------
# stages


def cmd_synth(cfg: PipelineConfig) -> dict:
    if cfg.manifest:
        log.info("manifest supplied (%s); nothing to synthesize", cfg.manifest)
        return {"skipped": True}
    out = _fresh(cfg.run_path / "data")
    base = PhantomConfig(**cfg.synth.phantom)
    manifest = generate_dataset(out, [tuple(p) for p in cfg.synth.plan], base=base, seed=cfg.seed)
    return {"volumes": len(manifest.entries)}


def cmd_preprocess(cfg: PipelineConfig) -> dict:
    manifest = _manifest(cfg)
    out = _fresh(cfg.run_path / "prep")
    index = []
    for entry in manifest.entries:
        name = Path(entry.volume).name
        rec = {"name": name, "label": entry.label, "split": entry.split, "status": "ok"}
        try:
            _preprocess_volume(entry, manifest, cfg, out / f"{name}.npz")
        except SegmentationFailure as exc:
            log.warning("volume %s flagged: %s", name, exc)
            rec.update(status="failed", reason=str(exc))
        index.append(rec)
    _write_json(out / "index.json", index)
    return {"volumes": len(index), "failed": sum(r["status"] != "ok" for r in index)}


def _training_patches(cfg: PipelineConfig) -> tuple[np.ndarray, np.ndarray]:
    parts = [_prep(cfg, v["name"]).patches() for v in _volumes(cfg, "train")]
    if not parts:
        raise PrerequisiteError("training volumes (split 'train')", "preprocess")
    small = np.concatenate([p[0] for p in parts])
    large = np.concatenate([p[1] for p in parts])
    cap = cfg.features.max_patches
    if cap and len(small) > cap:
        idx = np.sort(np.random.default_rng([cfg.seed, 1]).choice(len(small), cap, replace=False))
        small, large = small[idx], large[idx]
    return small, large


def cmd_train_features(cfg: PipelineConfig) -> dict:
    _prep_index(cfg)
    small, large = _training_patches(cfg)
    out = _fresh(cfg.run_path / "models")
    f = cfg.features
    info = {"n_patches": len(small)}
    for method in f.methods:
        if method == "ddae":
            tc = TrainConfig(tuple(tuple(s) for s in f.lr_schedule), f.minibatch, f.momentum, f.corruption, cfg.seed)
            enc, traces = train_composite(small, large, tuple(f.arch), tuple(f.arch3), tc)
            for name, trace in traces.items():
                with open(out / f"loss_{name}.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(["epoch", "mean_loss", "lr"])
                    w.writerows(trace)
                info[f"final_loss_{name}"] = trace[-1][1]
        elif method in ("pca256", "pca95"):
            mode = "fixed-128" if method == "pca256" else "variance-0.95"
            enc = pca_fit([small, large], mode, n_fixed=f.pca_components)
        else:
            raise OctaError(f"unknown feature method {method!r}")
        save_model(enc, out / MODEL_FILES[method])
        info[f"code_dim_{method}"] = enc.code_dim
    return info


def _encoder(cfg: PipelineConfig, method: str):
    return load_model(_require(cfg.run_path / "models" / MODEL_FILES[method], "train-features"))


def _embed_volume(encoder, vol: PrepVolume) -> np.ndarray:
    small, large = vol.patches()
    return embed_dataset(encoder, small, large)


def _volume_metrics(vol: PrepVolume, anomaly: np.ndarray):
    pred = vol.paint(anomaly.astype(np.uint8)) > 0
    return seg_metrics(pred, vol.gt > 0, vol.roi())


def cmd_fit_svm(cfg: PipelineConfig) -> dict:
    _prep_index(cfg)
    encoders = {m: _encoder(cfg, m) for m in cfg.features.methods}
    small, large = _training_patches(cfg)
    val = [(v["name"], _prep(cfg, v["name"])) for v in _volumes(cfg, "validation")]
    val = [(n, vol) for n, vol in val if vol.gt is not None]
    root = _fresh(cfg.run_path / "svm")
    info = {}
    for method, enc in encoders.items():
        out = root / method
        out.mkdir()
        z_train = embed_dataset(enc, small, large)
        z_val = [_embed_volume(enc, vol) for _, vol in val]
        def score(model):
            per_vol = [_volume_metrics(vol, model.classify(z)) for (_, vol), z in zip(val, z_val)]
            summ = summarize(per_vol)
            return {m: summ[m]["mean"] for m in METRICS}

        rows, models, nu_best = sweep_nu(z_train, score if val else None, cfg.svm.nu_grid,
                                         offset=cfg.svm.offset, scaling=cfg.svm.scaling, tol=cfg.svm.tol,
                                         max_iter=cfg.svm.max_iter, seed=cfg.seed)
        for nu, model in models.items():
            save_model(model, out / f"nu_{nu:g}.octm")
        chosen = next(r for r in rows if r["nu"] == nu_best)
        cols = ["nu", "status", "train_anomalous_fraction", *METRICS]
        with open(out / "sweep.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(rows)
        _write_json(out / "chosen.json", {"nu": chosen["nu"], "sweep": rows})
        info[method] = {"nu": chosen["nu"], "validation_dice": chosen.get("dice")}
    return info


def _overlay(image: np.ndarray, roi: np.ndarray, colors: np.ndarray, painted: np.ndarray) -> np.ndarray:
    """Gray image with retina pixels tinted by ``colors[painted]``."""
    gray = np.rint(np.clip(image, 0, 1) * 255).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    tint = colors[np.clip(painted, 0, len(colors) - 1)]
    rgb[roi] = 0.55 * rgb[roi] + 0.45 * tint[roi]
    return np.rint(rgb).astype(np.uint8)


NORMAL_ANOMALY_COLORS = np.array([[255, 0, 0], [0, 0, 255]], dtype=np.float64)  # red normal, blue anomaly


def cmd_segment(cfg: PipelineConfig) -> dict:
    volumes = [v for v in _volumes(cfg) if v["split"] != "train"]
    models = {}
    for method in cfg.features.methods:
        chosen = _require(cfg.run_path / "svm" / method / "chosen.json", "fit-svm")
        nu = _read_json(chosen)["nu"]
        models[method] = (_encoder(cfg, method), load_model(cfg.run_path / "svm" / method / f"nu_{nu:g}.octm"), nu)
    root = _fresh(cfg.run_path / "segment")
    index = {}
    for method, (enc, svm, nu) in models.items():
        out = root / method
        (out / "overlays").mkdir(parents=True)
        names = []
        for v in volumes:
            vol = _prep(cfg, v["name"])
            z = _embed_volume(enc, vol)
            decision = svm.decision(z).astype(np.float32)
            anomaly = (decision < 0).astype(np.uint8)
            np.savez(out / f"{v['name']}.npz", embeddings=z, decision=decision, anomaly=anomaly,
                     counts=vol.counts)
            if v["split"] in ("validation", "test"):
                painted = vol.paint(anomaly)
                roi = vol.roi()
                for s in range(vol.n_slices):
                    write_ppm(out / "overlays" / f"{v['name']}_s{s:03d}.ppm",
                              _overlay(vol.images[s], roi[s], NORMAL_ANOMALY_COLORS, painted[s]))
            names.append(v["name"])
        index[method] = {"nu": nu, "volumes": names}
    _write_json(root / "index.json", index)
    return {m: len(v["volumes"]) for m, v in index.items()}


def _segment_index(cfg: PipelineConfig) -> dict:
    return _read_json(_require(cfg.run_path / "segment" / "index.json", "segment"))


def _segmentation(cfg: PipelineConfig, method: str, name: str):
    with np.load(cfg.run_path / "segment" / method / f"{name}.npz") as f:
        return {k: f[k] for k in f.files}


def palette(n: int) -> np.ndarray:
    """``n`` well-spread RGB colors (0..255)."""
    return np.array([[255 * c for c in colorsys.hsv_to_rgb(i / max(n, 1), 0.85, 1.0)] for i in range(n)])


def cmd_categorize(cfg: PipelineConfig) -> dict:
    index = _segment_index(cfg)
    if CLUSTER_METHOD not in index:
        raise PrerequisiteError(f"segmentation with method {CLUSTER_METHOD!r}", "segment")
    split = {v["name"]: v["split"] for v in _volumes(cfg)}
    names = index[CLUSTER_METHOD]["volumes"]
    pool = [_segmentation(cfg, CLUSTER_METHOD, n) for n in names if split[n] == "categorization"]
    anomalous = [s["embeddings"][s["anomaly"] == 1] for s in pool]
    z = np.concatenate(anomalous) if anomalous else np.zeros((0, 1))
    if len(z) < 3:
        raise OctaError("fewer than 3 anomalous superpixels in the categorization split")
    zp, shift = shift_nonnegative(z)
    lo, hi = cfg.cluster.C_range
    model, curve = select_C(zp, range(lo, hi + 1), seed=cfg.seed, n_restarts=cfg.cluster.n_restarts, shift=shift)
    out = _fresh(cfg.run_path / "categorize")
    (out / "maps").mkdir()
    (out / "overlays").mkdir()
    save_model(model, out / "cluster.octm")
    with open(out / "db_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["C", "db_index"])
        w.writerows(curve)
    colors = palette(model.C)
    with open(out / "palette.txt", "w") as fh:
        for j, c in enumerate(colors):
            fh.write(f"cluster_{j} = {int(round(c[0]))} {int(round(c[1]))} {int(round(c[2]))}\n")
    for n in names:
        seg = _segmentation(cfg, CLUSTER_METHOD, n)
        ids = np.full(len(seg["anomaly"]), -1, dtype=np.int16)
        hit = seg["anomaly"] == 1
        if hit.any():
            ids[hit] = np.atleast_1d(model.assign(seg["embeddings"][hit]))
        vol = _prep(cfg, n)
        maps = vol.paint(ids, fill=-1)
        np.savez(out / "maps" / f"{n}.npz", maps=maps)
        if split[n] == "test":
            roi = vol.roi()
            for s in range(vol.n_slices):
                write_pgm(out / "maps" / f"{n}_s{s:03d}.pgm", (maps[s] + 1).astype(np.uint8))
                tinted = _overlay(vol.images[s], roi[s] & (maps[s] >= 0), colors, maps[s])
                write_ppm(out / "overlays" / f"{n}_s{s:03d}.ppm", tinted)
    _write_json(out / "summary.json", {"C": model.C, "n_points": len(z), "objective": model.objective,
                                       "db_curve": [[c, d] for c, d in curve]})
    return {"C": model.C, "n_points": len(z)}


def _feature_rows(cfg: PipelineConfig, names, C: int, binary: bool) -> np.ndarray:
    rows = []
    for n in names:
        with np.load(cfg.run_path / "categorize" / "maps" / f"{n}.npz") as f:
            maps = f["maps"]
        rows.append(cluster_volume_features(maps, C, _prep(cfg, n).spacing, binary=binary))
    return np.array(rows)


def cmd_classify(cfg: PipelineConfig) -> dict:
    summary = _read_json(_require(cfg.run_path / "categorize" / "summary.json", "categorize"))
    C = summary["C"]
    vols = {v["name"]: v for v in _volumes(cfg)}
    train = [n for n, v in vols.items() if v["split"] == "categorization"]
    test = [n for n, v in vols.items() if v["split"] == "test"]
    if not train or not test:
        raise PrerequisiteError("volumes in both the categorization and test splits", "synth")
    out = _fresh(cfg.run_path / "classify")
    results, predictions = {}, {}
    for kind, binary in (("clusters", False), ("binary", True)):
        names = [f"cluster_{j}" for j in range(C)] if not binary else ["anomaly_total"]
        tr = FeatureTable(_feature_rows(cfg, train, C, binary), names, [vols[n]["label"] for n in train])
        te = FeatureTable(_feature_rows(cfg, test, C, binary), names, [vols[n]["label"] for n in test])
        model = fit_forest(tr, n_trees=cfg.forest.n_trees, seed=cfg.seed)
        pred, votes = model.predict(te.rows)
        cm = confusion(list(pred), list(te.labels), model.classes)
        imp = permutation_importance(model, tr, seed=cfg.seed)
        with open(out / f"confusion_{kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\predicted", *cm.classes])
            w.writerows(cm.as_rows())
        with open(out / f"importance_{kind}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["feature", "mda", "gini", *[f"signed_mda_{c}" for c in imp.classes]])
            for i, f in enumerate(imp.names):
                w.writerow([f, imp.overall[i], imp.gini[i], *imp.signed[:, i]])
        aucs = {}
        for k, c in enumerate(model.classes):
            truth = np.asarray(te.labels) == c
            if truth.any() and not truth.all():
                aucs[str(c)] = roc_auc(votes[:, k], truth)
        results[kind] = {"accuracy": cm.accuracy, "oob_accuracy": oob_accuracy(model, tr),
                         "confusion": cm.as_rows(), "classes": list(cm.classes), "auc_one_vs_rest": aucs,
                         "n_train": len(train), "n_test": len(test)}
        predictions[kind] = [{"volume": n, "label": vols[n]["label"], "predicted": str(p),
                              "votes": {str(c): float(v) for c, v in zip(model.classes, row)}}
                             for n, p, row in zip(test, pred, votes)]
        save_model(model, out / f"forest_{kind}.octm")
    _write_json(out / "predictions.json", predictions)
    _write_json(out / "results.json", results)
    return {k: r["accuracy"] for k, r in results.items()}


def cmd_eval(cfg: PipelineConfig) -> dict:
    index = _segment_index(cfg)
    vols = {v["name"]: v for v in _volumes(cfg)}
    report = {"profile": cfg.profile, "seed": cfg.seed, "config_hash": cfg.digest(), "segmentation": {}}
    dice = {}
    rows = []
    out = _fresh(cfg.run_path / "eval")
    for method, entry in index.items():
        per_vol = []
        for n in entry["volumes"]:
            v = vols[n]
            if v["split"] != "test" or (cfg.eval.labels and v["label"] not in cfg.eval.labels):
                continue
            vol = _prep(cfg, n)
            if vol.gt is None or not (vol.gt > 0).any():
                continue
            m = _volume_metrics(vol, _segmentation(cfg, method, n)["anomaly"])
            per_vol.append((n, v["label"], m))
        if not per_vol:
            continue
        summ = summarize([m for _, _, m in per_vol])
        by_label = {lab: summarize([m for _, l, m in per_vol if l == lab])
                    for lab in sorted({l for _, l, _ in per_vol})}
        sweep = _read_json(cfg.run_path / "svm" / method / "chosen.json")["sweep"]
        ok = [(r["nu"], r) for r in sweep if r["status"] == "ok" and "dice" in r]
        curve = [(nu, r["recall"], r["precision"]) for nu, r in sorted(ok)]
        with open(out / f"pr_{method}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["nu", "recall", "precision"])
            w.writerows(curve)
        report["segmentation"][method] = {
            "nu": entry["nu"], "n_volumes": len(per_vol), "summary": summ, "by_label": by_label,
            "per_volume": [{"volume": n, "label": l, **m.as_dict()} for n, l, m in per_vol],
            "pr_curve": [list(p) for p in curve], "pr_area": pr_area(curve) if len(curve) > 1 else None,
        }
        dice[method] = [m.dice for _, _, m in per_vol]
        rows.append((method, entry["nu"], summ))
    (out / "table.txt").write_text(format_table(rows) + "\n")
    if "ddae" in dice and "pca256" in dice:
        try:
            p = wilcoxon_signed_rank(dice["ddae"], dice["pca256"])
        except OctaError as exc:
            p = f"undefined: {exc}"
        report["wilcoxon_dice_ddae_vs_pca256"] = p
        report["ddae_mean_dice_ge_pca256"] = bool(np.mean(dice["ddae"]) >= np.mean(dice["pca256"]))
    cat = cfg.run_path / "categorize" / "summary.json"
    if cat.exists():
        s = _read_json(cat)
        report["categorization"] = {"C": s["C"], "n_points": s["n_points"], "db_curve": s["db_curve"]}
    cls = cfg.run_path / "classify" / "results.json"
    if cls.exists():
        report["classification"] = _read_json(cls)
    _write_json(out / "metrics.json", report)
    return {m: r["summary"]["dice"]["mean"] for m, r in report["segmentation"].items()}


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "train-features": cmd_train_features,
    "fit-svm": cmd_fit_svm,
    "segment": cmd_segment,
    "categorize": cmd_categorize,
    "classify": cmd_classify,
    "eval": cmd_eval,
}


def run_stage(stage: str, cfg: PipelineConfig) -> dict:
    """Run one stage under the run-directory lock and write its run record."""
    if stage not in COMMANDS:
        raise OctaError(f"unknown stage {stage!r}; expected one of {STAGES}")
    run = cfg.run_path
    with _locked(run):
        t0 = time.perf_counter()
        info = COMMANDS[stage](cfg)
        wall = time.perf_counter() - t0
        (run / "records").mkdir(exist_ok=True)
        _write_json(run / "config.json", cfg.to_dict())
        _write_json(run / "records" / f"{stage}.json", {
            "stage": stage, "config_hash": cfg.digest(), "seed": cfg.seed, "profile": cfg.profile,
            "version": __version__, "wall_time_s": round(wall, 3), "config": cfg.to_dict(), "result": info,
        })
    log.info("%s done in %.1fs: %s", stage, wall, info)
    return info


def run_all(cfg: PipelineConfig, stages=STAGES) -> dict:
    return {s: run_stage(s, cfg) for s in stages}
