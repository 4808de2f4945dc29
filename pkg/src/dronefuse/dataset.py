"""Label files, manifests, square cropping and synthetic fixtures.

Label lines are ``class cx cy w h`` in normalized center format; prediction
files append a sixth ``confidence`` column. An empty file is a background
image.
"""
from __future__ import annotations

import hashlib
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .detections import Annotation, BBox, Detection, iou

FIELDS = ("class_id", "cx", "cy", "w", "h", "confidence")


class LabelFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None, source: str | None = None):
        where = ""
        if source:
            where = f"{source}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")
        self.line = line
        self.source = source


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _parse_rows(text: str, with_confidence: bool, source: str | None):
    ncols = 6 if with_confidence else 5
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != ncols:
            raise LabelFormatError(f"expected {ncols} fields, got {len(parts)}", lineno, source)
        try:
            cls = int(parts[0])
        except ValueError:
            raise LabelFormatError(f"class_id {parts[0]!r} is not an integer", lineno, source) from None
        if cls < 0:
            raise LabelFormatError("class_id must be non-negative", lineno, source)
        vals = []
        for name, tok in zip(FIELDS[1:ncols], parts[1:]):
            try:
                v = float(tok)
            except ValueError:
                raise LabelFormatError(f"{name} {tok!r} is not a number", lineno, source) from None
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise LabelFormatError(f"{name}={tok} outside [0, 1]", lineno, source)
            if name in ("w", "h") and v <= 0.0:
                raise LabelFormatError(f"{name} must be positive", lineno, source)
            vals.append(v)
        rows.append((cls, vals))
    return rows


def parse_labels(text: str, source: str | None = None) -> list[Annotation]:
    return [Annotation(BBox(*v), c) for c, v in _parse_rows(text, False, source)]


def write_labels(annotations: Iterable[Annotation]) -> str:
    return "".join(
        f"{a.class_id} {_fmt(a.bbox.cx)} {_fmt(a.bbox.cy)} {_fmt(a.bbox.w)} {_fmt(a.bbox.h)}\n" for a in annotations
    )


def parse_predictions(text: str, source: str | None = None) -> list[Detection]:
    return [Detection(BBox(*v[:4]), v[4], c) for c, v in _parse_rows(text, True, source)]


def write_predictions(dets: Iterable[Detection]) -> str:
    return "".join(
        f"{d.class_id} {_fmt(d.bbox.cx)} {_fmt(d.bbox.cy)} {_fmt(d.bbox.w)} {_fmt(d.bbox.h)} {_fmt(d.confidence)}\n"
        for d in dets
    )


def read_label_dir(path, predictions: bool = False) -> dict[str, list]:
    """Parse every ``*.txt`` in a directory, keyed by file stem."""
    out = {}
    parse = parse_predictions if predictions else parse_labels
    for f in sorted(Path(path).glob("*.txt")):
        out[f.stem] = parse(f.read_text(encoding="utf-8"), source=f.name)
    return out


# -- manifests --------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    width: int
    height: int
    label_path: str
    frame_index: int | None = None
    camera_position: str | None = None


def parse_manifest(text: str) -> list[ManifestEntry]:
    """Tab-separated ``image_id width height label_path [frame_index] [camera_position]``."""
    entries = []
    seen_ids: set[str] = set()
    seen_frames: set[tuple[str | None, int]] = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.rstrip("\n").split("\t")
        if not 4 <= len(parts) <= 6:
            raise LabelFormatError(f"expected 4 to 6 tab-separated fields, got {len(parts)}", lineno)
        try:
            width, height = int(parts[1]), int(parts[2])
            frame = int(parts[4]) if len(parts) > 4 and parts[4] != "" else None
        except ValueError as exc:
            raise LabelFormatError(str(exc), lineno) from None
        if width < 1 or height < 1:
            raise LabelFormatError("image size must be positive", lineno)
        camera = parts[5] if len(parts) > 5 and parts[5] != "" else None
        if parts[0] in seen_ids:
            raise LabelFormatError(f"duplicate image_id {parts[0]!r}", lineno)
        seen_ids.add(parts[0])
        if frame is not None:
            if (camera, frame) in seen_frames:
                raise LabelFormatError(f"duplicate frame_index {frame} for camera {camera!r}", lineno)
            seen_frames.add((camera, frame))
        entries.append(ManifestEntry(parts[0], width, height, parts[3], frame, camera))
    return entries


def write_manifest(entries: Iterable[ManifestEntry]) -> str:
    lines = []
    for e in entries:
        cols = [e.image_id, str(e.width), str(e.height), e.label_path]
        if e.frame_index is not None or e.camera_position is not None:
            cols.append("" if e.frame_index is None else str(e.frame_index))
        if e.camera_position is not None:
            cols.append(e.camera_position)
        lines.append("\t".join(cols) + "\n")
    return "".join(lines)


# -- square cropping --------------------------------------------------------

@dataclass(frozen=True)
class CropSpec:
    output_size: int = 640
    seed: int = 0
    min_box_retention: float = 0.8
    max_draws: int = 32
    strategy: str = "coarse-then-random"

    def __post_init__(self):
        if self.output_size < 1:
            raise ValueError("output_size must be positive")
        if not 0.0 < self.min_box_retention <= 1.0:
            raise ValueError("min_box_retention must lie in (0, 1]")


@dataclass(frozen=True)
class CropWindow:
    x: int
    y: int
    size: int


@dataclass(frozen=True)
class CropResult:
    window: CropWindow
    annotations: list[Annotation]
    fallback: bool = False


def derive_seed(seed: int, image_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{image_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def _pixel_box(a: Annotation, width: int, height: int) -> tuple[float, float, float, float]:
    b = a.bbox
    return ((b.cx - b.w / 2) * width, (b.cy - b.h / 2) * height, (b.cx + b.w / 2) * width, (b.cy + b.h / 2) * height)


def _retention(box, win: CropWindow) -> float:
    x1, y1, x2, y2 = box
    area = (x2 - x1) * (y2 - y1)
    if area <= 0:
        return 0.0
    iw = min(x2, win.x + win.size) - max(x1, win.x)
    ih = min(y2, win.y + win.size) - max(y1, win.y)
    return max(iw, 0.0) * max(ih, 0.0) / area


def _centered(center: float, size: int, limit_lo: int, limit_hi: int) -> int:
    """Integer origin of a ``size`` span centred on ``center``, clamped to [limit_lo, limit_hi - size]."""
    origin = int(math.floor(center - size / 2))
    return min(max(origin, limit_lo), limit_hi - size)


def remap(annotations: Sequence[Annotation], width: int, height: int, win: CropWindow,
          min_retention: float) -> list[Annotation]:
    """Crop-relative normalized annotations, clipped; boxes keeping < ``min_retention`` of their area are dropped."""
    out = []
    for a in annotations:
        box = _pixel_box(a, width, height)
        if _retention(box, win) < min_retention:
            continue
        x1, y1, x2, y2 = box
        bb = BBox.from_corners((x1 - win.x) / win.size, (y1 - win.y) / win.size,
                               (x2 - win.x) / win.size, (y2 - win.y) / win.size)
        out.append(Annotation(bb, a.class_id))
    return out


def square_crop(image_size: tuple[int, int], annotations: Sequence[Annotation], spec: CropSpec,
                image_id: str = "") -> CropResult:
    """Coarse square around the first annotation, then a random ``output_size`` square inside it.

    Random draws must keep at least ``min_box_retention`` of the first box's
    area; after ``max_draws`` failures the window centred on that box is
    used. Background images get a uniformly random window.
    """
    width, height = image_size
    size = spec.output_size
    side = min(width, height)
    if size > side:
        raise ValueError(f"output size {size} exceeds image extent {width}×{height}")
    rng = random.Random(derive_seed(spec.seed, image_id))

    if not annotations:
        win = CropWindow(rng.randint(0, width - size), rng.randint(0, height - size), size)
        return CropResult(win, [])

    box = _pixel_box(annotations[0], width, height)
    bcx, bcy = (box[0] + box[2]) / 2, (box[1] + box[3]) / 2
    coarse = CropWindow(_centered(bcx, side, 0, width), _centered(bcy, side, 0, height), side)

    for _ in range(spec.max_draws):
        win = CropWindow(coarse.x + rng.randint(0, side - size), coarse.y + rng.randint(0, side - size), size)
        if _retention(box, win) >= spec.min_box_retention:
            return CropResult(win, remap(annotations, width, height, win, spec.min_box_retention))
    win = CropWindow(_centered(bcx, size, coarse.x, coarse.x + side), _centered(bcy, size, coarse.y, coarse.y + side),
                     size)
    return CropResult(win, remap(annotations, width, height, win, spec.min_box_retention), fallback=True)


# -- synthetic fixtures -----------------------------------------------------

@dataclass
class FixtureDataset:
    manifest: list[ManifestEntry]
    labels: dict[str, list[Annotation]]
    detections: dict[str, list[Detection]]
    composition: dict[str, int] = field(default_factory=dict)

    def write(self, root) -> None:
        """Write ``manifest.tsv``, ``labels/<id>.txt`` and ``preds/<id>.txt`` under ``root``."""
        root = Path(root)
        (root / "labels").mkdir(parents=True, exist_ok=True)
        (root / "preds").mkdir(parents=True, exist_ok=True)
        (root / "manifest.tsv").write_text(write_manifest(self.manifest), encoding="utf-8")
        for e in self.manifest:
            (root / "labels" / f"{e.image_id}.txt").write_text(write_labels(self.labels[e.image_id]), encoding="utf-8")
            (root / "preds" / f"{e.image_id}.txt").write_text(write_predictions(self.detections[e.image_id]),
                                                              encoding="utf-8")

    def to_bytes(self) -> bytes:
        parts = [write_manifest(self.manifest)]
        for e in self.manifest:
            parts.append(f"## {e.image_id}\n{write_labels(self.labels[e.image_id])}")
            parts.append(write_predictions(self.detections[e.image_id]))
        return "".join(parts).encode("utf-8")


_GRID = 4  # boxes are placed in disjoint cells of a 4x4 grid


def gen_fixture_dataset(n_images: int, background_fraction: float = 0.075, seed: int = 0,
                        tp: int | None = None, fp: int | None = None, fn: int | None = None,
                        image_size: tuple[int, int] = (2040, 1086)) -> FixtureDataset:
    """Reproducible ground truth plus detections of known TP/FP/FN make-up.

    Every box sits alone in its own grid cell, so each true positive overlaps
    only its own ground truth (IoU ≥ 0.8) and false positives overlap nothing.
    Unspecified counts are drawn from the seed, topped up so that every
    non-background image has ground truth; explicit counts are honoured
    exactly even if some images end up without boxes. Detections all have
    confidence in [0.3, 1).
    """
    if n_images < 1:
        raise ValueError("n_images must be ≥ 1")
    if not 0.0 <= background_fraction <= 1.0:
        raise ValueError("background_fraction must lie in [0, 1]")
    rng = random.Random(seed)
    n_bg = min(int(round(n_images * background_fraction)), n_images - 1) if background_fraction < 1 else n_images
    ids = [f"img{i:05d}" for i in range(n_images)]
    background = set(rng.sample(ids, n_bg))
    fg = [i for i in ids if i not in background]
    cells = _GRID * _GRID
    drawn = tp is None and fn is None
    tp = rng.randint(0, 2 * len(fg)) if tp is None else tp
    fn = rng.randint(0, len(fg)) if fn is None else fn
    fp = rng.randint(0, n_images) if fp is None else fp
    if drawn and tp + fn < len(fg):
        fn += len(fg) - (tp + fn)  # every foreground image carries ground truth
    if tp + fn > 0 and not fg:
        raise ValueError("ground-truth boxes requested but every image is background")
    if tp + fn + fp > cells * n_images:
        raise ValueError("too many boxes for the fixture grid")

    free = {i: rng.sample(range(cells), cells) for i in ids}
    labels: dict[str, list[Annotation]] = {i: [] for i in ids}
    dets: dict[str, list[Detection]] = {i: [] for i in ids}

    def cell_box(cell: int) -> BBox:
        gx, gy = divmod(cell, _GRID)
        w = rng.uniform(0.3, 0.8) / _GRID
        h = rng.uniform(0.3, 0.8) / _GRID
        cx = (gx + 0.5) / _GRID + rng.uniform(-0.05, 0.05) / _GRID
        cy = (gy + 0.5) / _GRID + rng.uniform(-0.05, 0.05) / _GRID
        return BBox(cx, cy, w, h)

    gt_kinds = ["tp"] * tp + ["fn"] * fn
    rng.shuffle(gt_kinds)
    owners = [fg[k % len(fg)] for k in range(len(gt_kinds))] if fg else []
    for kind, img in zip(gt_kinds, owners):
        if not free[img]:
            raise ValueError("too many boxes for one fixture image")
        gt = cell_box(free[img].pop())
        labels[img].append(Annotation(gt, 0))
        if kind == "tp":
            shrink = rng.uniform(0.9, 1.0)
            box = BBox(gt.cx, gt.cy, gt.w * shrink, gt.h * shrink)
            dets[img].append(Detection(box, round(rng.uniform(0.3, 1.0), 6), 0))
    for k in range(fp):
        img = ids[rng.randrange(n_images)]
        if not free[img]:
            img = next(i for i in ids if free[i])
        dets[img].append(Detection(cell_box(free[img].pop()), round(rng.uniform(0.3, 1.0), 6), 0))

    width, height = image_size
    manifest = [ManifestEntry(i, width, height, f"labels/{i}.txt") for i in ids]
    return FixtureDataset(manifest, labels, dets, {"tp": tp, "fp": fp, "fn": fn})
