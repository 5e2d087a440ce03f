"""On-disk formats: P5 PGM scans and masks, key/value sidecars, manifests and
the ``OCTM`` binary model container."""

from __future__ import annotations

import csv
import json
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    CapacityError,
    FormatError,
    IntegrityError,
    ShapeError,
    ValidationError,
    VersionError,
)

SLICE_RE = re.compile(r"^slice_(\d+)\.pgm$")
META_NAME = "meta.txt"
LEGEND_NAME = "legend.txt"
SPLITS = ("train", "validation", "test", "categorization")

MAGIC = b"OCTM"
FORMAT_VERSION = 1


# --------------------------------------------------------------------------
# domain types


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class OctVolume:
    bscans: tuple
    spacing: tuple = (11.0, 4.0, 120.0)
    id: str = "volume"

    def __post_init__(self):
        if len(self.bscans) < 1:
            raise ShapeError("a volume needs at least one B-scan")
        scans = tuple(_frozen(b) for b in self.bscans)
        shapes = {b.shape for b in scans}
        if len(shapes) != 1 or scans[0].ndim != 2:
            raise ShapeError(f"B-scans must share one 2-D shape, got {sorted(shapes)}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive values, got {self.spacing}")
        object.__setattr__(self, "bscans", scans)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def height(self) -> int:
        return self.bscans[0].shape[0]

    @property
    def width(self) -> int:
        return self.bscans[0].shape[1]

    @property
    def voxel_volume(self) -> float:
        """Volume of one voxel in cubic micrometers."""
        sx, sy, sz = self.spacing
        return sx * sy * sz

    def __len__(self):
        return len(self.bscans)

    def as_array(self) -> np.ndarray:
        return np.stack(self.bscans)


@dataclass(frozen=True)
class AnnotationMask:
    labels: np.ndarray
    legend: Mapping[int, str] = field(default_factory=lambda: {0: "normal"})

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim not in (2, 3):
            raise ShapeError("mask must be 2-D or 3-D")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise CapacityError("mask labels must fit in 8 bits")
        legend = {int(k): str(v) for k, v in dict(self.legend).items()}
        if any(k < 0 or k > 255 for k in legend):
            raise CapacityError("legend labels must fit in 8 bits")
        if len(set(legend.values())) != len(legend):
            raise ValidationError("legend names must be unique")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))
        object.__setattr__(self, "legend", legend)


@dataclass(frozen=True)
class ManifestEntry:
    volume: str
    label: str
    mask: str | None = None
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValidationError(f"unknown split tag {self.split!r}; expected one of {SPLITS}")


@dataclass
class DatasetManifest:
    entries: list
    root: Path = Path(".")

    def select(self, split=None, label=None):
        return [
            e for e in self.entries
            if (split is None or e.split == split) and (label is None or e.label == label)
        ]

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()


# --------------------------------------------------------------------------
# PGM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("truncated PGM header")
    return buf[start:pos], pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM into a uint8 or uint16 array."""
    buf = Path(path).read_bytes()
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"{path}: not a P5 PGM (magic {magic!r})")
    vals = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{path}: bad PGM header token {tok!r}")
        vals.append(int(tok))
    width, height, maxval = vals
    if not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    nbytes = width * height * dtype.itemsize
    payload = buf[pos:pos + nbytes]
    if len(payload) != nbytes:
        raise FormatError(f"{path}: truncated PGM payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(height, width)
    return arr.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise ShapeError("PGM payload must be 2-D")
    if pixels.dtype == np.uint8:
        maxval, payload = 255, pixels.tobytes()
    elif pixels.dtype == np.uint16:
        maxval, payload = 65535, pixels.astype(">u2").tobytes()
    else:
        raise FormatError(f"PGM needs uint8 or uint16 pixels, got {pixels.dtype}")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Binary (P6) color image from an H x W x 3 uint8 array."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ShapeError("PPM payload must be H x W x 3 uint8")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


# --------------------------------------------------------------------------
# sidecars


def read_sidecar(path) -> dict:
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected `key = value`")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def write_sidecar(path, values: Mapping) -> None:
    lines = [f"{k} = {v}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --------------------------------------------------------------------------
# volumes and masks


def _slice_files(directory: Path) -> list[tuple[int, Path]]:
    found = []
    for p in directory.iterdir():
        m = SLICE_RE.match(p.name)
        if m:
            found.append((int(m.group(1)), p))
    found.sort()
    idx = [i for i, _ in found]
    if len(set(idx)) != len(idx):
        raise FormatError(f"{directory}: duplicate slice indices")
    return found


def load_volume(path) -> OctVolume:
    directory = Path(path)
    meta_path = directory / META_NAME
    if not meta_path.exists():
        raise FormatError(f"{directory}: missing sidecar {META_NAME}")
    meta = read_sidecar(meta_path)
    try:
        spacing = tuple(float(s) for s in meta["spacing"].split())
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{meta_path}: bad or missing spacing") from exc
    files = _slice_files(directory)
    if not files:
        raise FormatError(f"{directory}: no slice_*.pgm files")
    scans = [read_pgm(p) for _, p in files]
    if len({s.shape for s in scans}) != 1:
        raise ShapeError(f"{directory}: B-scans have mixed dimensions")
    return OctVolume(tuple(scans), spacing, meta.get("id", directory.name))


def save_volume(volume: OctVolume, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(len(volume) - 1)))
    for i, b in enumerate(volume.bscans):
        write_pgm(directory / f"slice_{i:0{width}d}.pgm", b)
    write_sidecar(directory / META_NAME, {
        "id": volume.id,
        "spacing": " ".join(repr(s) for s in volume.spacing),
    })


def save_mask(mask: AnnotationMask, path) -> None:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    labels = mask.labels if mask.labels.ndim == 3 else mask.labels[None]
    width = max(3, len(str(len(labels) - 1)))
    for i, sl in enumerate(labels):
        write_pgm(directory / f"slice_{i:0{width}d}.pgm", sl)
    legend = {"ndim": mask.labels.ndim}
    legend.update({f"label_{k}": v for k, v in sorted(mask.legend.items())})
    write_sidecar(directory / LEGEND_NAME, legend)


def load_mask(path) -> AnnotationMask:
    directory = Path(path)
    legend_path = directory / LEGEND_NAME
    if not legend_path.exists():
        raise FormatError(f"{directory}: missing sidecar {LEGEND_NAME}")
    side = read_sidecar(legend_path)
    ndim = int(side.pop("ndim", 3))
    names = list(side.values())
    if len(set(names)) != len(names):
        raise ValidationError(f"{legend_path}: duplicate legend names")
    legend = {int(k.removeprefix("label_")): v for k, v in side.items()}
    files = _slice_files(directory)
    if not files:
        raise FormatError(f"{directory}: no slice_*.pgm files")
    labels = np.stack([read_pgm(p) for _, p in files])
    if ndim == 2:
        labels = labels[0]
    return AnnotationMask(labels, legend)


def load_surfaces_csv(path) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Read precomputed surfaces: CSV with columns slice, col, ilm_row, bm_row."""
    rows: dict[int, dict[int, tuple[int, int]]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            s, c = int(rec["slice"]), int(rec["col"])
            rows.setdefault(s, {})[c] = (int(rec["ilm_row"]), int(rec["bm_row"]))
    out = {}
    for s, cols in rows.items():
        n = max(cols) + 1
        if sorted(cols) != list(range(n)):
            raise FormatError(f"{path}: slice {s} does not cover columns 0..{n - 1}")
        ilm = np.array([cols[c][0] for c in range(n)])
        bm = np.array([cols[c][1] for c in range(n)])
        out[s] = (ilm, bm)
    return out


def save_surfaces_csv(path, surfaces: Mapping[int, tuple]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slice", "col", "ilm_row", "bm_row"])
        for s in sorted(surfaces):
            ilm, bm = surfaces[s]
            for c, (i, b) in enumerate(zip(ilm, bm)):
                w.writerow([s, c, int(i), int(b)])


# --------------------------------------------------------------------------
# manifests


MANIFEST_FIELDS = ["volume", "label", "mask", "split"]


def write_manifest(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        w.writeheader()
        for e in manifest.entries:
            w.writerow({"volume": e.volume, "label": e.label, "mask": e.mask or "", "split": e.split})


def read_manifest(path, check_paths: bool = True) -> DatasetManifest:
    path = Path(path)
    entries = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            entries.append(ManifestEntry(rec["volume"], rec["label"], rec.get("mask") or None, rec["split"]))
    manifest = DatasetManifest(entries, path.parent)
    if check_paths:
        for e in entries:
            for rel in (e.volume, e.mask):
                if rel and not manifest.resolve(rel).exists():
                    raise FormatError(f"{path}: unresolvable path {rel}")
    return manifest


# --------------------------------------------------------------------------
# OCTM model container
#
# layout (all integers little-endian):
#   b"OCTM" | u32 version | u32 kind_len | kind utf8 | u32 meta_len | meta json
#   | u32 n_arrays | per array: u32 name_len, name, u32 ndim, u32 dims[ndim], f32 data
#   | u32 crc32 of everything before it


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def pack_container(kind: str, meta: Mapping, arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), _pack_str(kind),
             _pack_str(json.dumps(meta, sort_keys=True)), struct.pack("<I", len(arrays))]
    for name, a in arrays.items():
        a = np.asarray(a, dtype="<f4")
        parts.append(_pack_str(name))
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("model container is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")


def unpack_container(buf: bytes) -> tuple[str, dict, dict]:
    if buf[:4] != MAGIC:
        raise FormatError("not an OCTM model container (bad magic)")
    if len(buf) < 12:
        raise IntegrityError("model container is truncated")
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionError(f"container version {version}, this build reads {FORMAT_VERSION}")
    kind = r.string()
    meta = json.loads(r.string())
    arrays = {}
    for _ in range(r.u32()):
        name = r.string()
        ndim = r.u32()
        shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    crc = r.u32()
    if crc != zlib.crc32(buf[:r.pos - 4]):
        raise IntegrityError("model container checksum mismatch")
    if r.pos != len(buf):
        raise IntegrityError("trailing bytes after model container")
    return kind, meta, arrays


def _registry() -> dict:
    from .cluster import ClusterModel
    from .features import PcaModel
    from .forest import ForestModel
    from .neuralnet import CompositeEncoder, DdaeModel
    from .ocsvm import OcsvmModel

    classes = [DdaeModel, CompositeEncoder, OcsvmModel, ClusterModel, PcaModel, ForestModel]
    return {cls.kind: cls for cls in classes}


def save_model(model, path) -> None:
    """Write any trained model exposing ``kind``/``to_arrays`` to ``path``."""
    meta, arrays = model.to_arrays()
    Path(path).write_bytes(pack_container(model.kind, meta, arrays))


def load_model(path):
    kind, meta, arrays = unpack_container(Path(path).read_bytes())
    registry = _registry()
    if kind not in registry:
        raise FormatError(f"unknown model kind {kind!r}")
    return registry[kind].from_arrays(meta, arrays)


def save_matrix(path, name: str, matrix: np.ndarray, meta: Mapping | None = None) -> None:
    Path(path).write_bytes(pack_container("matrix", dict(meta or {}), {name: matrix}))


def load_matrix(path) -> tuple[dict, dict]:
    kind, meta, arrays = unpack_container(Path(path).read_bytes())
    if kind != "matrix":
        raise FormatError(f"expected a matrix container, got {kind!r}")
    return meta, arrays
