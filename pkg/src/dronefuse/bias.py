"""Labeling-bias compensation for predicted boxes.

Manually drawn ground truth tends to be looser than the object, so predicted
boxes are enlarged about their center::

    w' = w + λ_w · w · h        h' = h + λ_h · w · h

with λ either fixed or chosen from the box's size category.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

from .detections import BBox, containment

FIXED_LAMBDA_W = 0.0057
FIXED_LAMBDA_H = 0.0023


@dataclass(frozen=True)
class SizeCategory:
    name: str
    width_ratio: tuple[float, float]
    height_ratio: tuple[float, float]
    lambda_w: float
    lambda_h: float

    def contains_width(self, w: float, last: bool = False) -> bool:
        lo, hi = self.width_ratio
        return lo <= w < hi or (last and w == hi)


def default_categories() -> list[SizeCategory]:
    """Size groups with their per-group scaling factors, smallest first."""
    return [
        SizeCategory("ExtraSmall", (0.000, 0.034), (0.000, 0.014), 0.0155, 0.0110),
        SizeCategory("Small", (0.034, 0.059), (0.014, 0.027), 0.0107, 0.0055),
        SizeCategory("Medium", (0.059, 0.094), (0.027, 0.044), 0.0071, 0.0020),
        SizeCategory("Large", (0.094, 0.144), (0.044, 0.072), 0.0044, 0.0014),
        SizeCategory("ExtraLarge", (0.144, 1.000), (0.072, 1.000), 0.0022, 0.0011),
    ]


def validate_categories(categories: Sequence[SizeCategory]) -> None:
    """Both ratio columns must tile [0, 1] in order; λ must be non-negative and non-increasing."""
    if not categories:
        raise ValueError("at least one size category is required")
    for attr in ("width_ratio", "height_ratio"):
        edges = [getattr(c, attr) for c in categories]
        if edges[0][0] != 0.0 or edges[-1][1] != 1.0:
            raise ValueError(f"{attr} intervals must start at 0 and end at 1")
        if any(not lo < hi for lo, hi in edges):
            raise ValueError(f"{attr} intervals must be non-empty")
        if any(a[1] != b[0] for a, b in zip(edges, edges[1:])):
            raise ValueError(f"{attr} intervals must be contiguous")
    for prev, cur in zip(categories, categories[1:]):
        if cur.lambda_w > prev.lambda_w or cur.lambda_h > prev.lambda_h:
            raise ValueError(f"scaling factors must not grow from {prev.name} to {cur.name}")
    if any(c.lambda_w < 0 or c.lambda_h < 0 for c in categories):
        raise ValueError("scaling factors must be non-negative")


def categorize(box: BBox, categories: Sequence[SizeCategory]) -> SizeCategory:
    """Category whose half-open width interval holds ``box.w``; the last interval is closed at 1."""
    for i, cat in enumerate(categories):
        if cat.contains_width(box.w, last=i == len(categories) - 1):
            return cat
    raise ValueError(f"width {box.w} is not covered by any category")


@dataclass(frozen=True)
class BiasConfig:
    mode: str = "variable"
    fixed_lambda_w: float = FIXED_LAMBDA_W
    fixed_lambda_h: float = FIXED_LAMBDA_H
    categories: tuple[SizeCategory, ...] = field(default_factory=lambda: tuple(default_categories()))

    def __post_init__(self):
        if self.mode not in ("fixed", "variable"):
            raise ValueError(f"bias mode must be 'fixed' or 'variable', got {self.mode!r}")
        if self.mode == "variable":
            validate_categories(self.categories)

    def lambdas(self, box: BBox) -> tuple[float, float]:
        if self.mode == "fixed":
            return self.fixed_lambda_w, self.fixed_lambda_h
        cat = categorize(box, self.categories)
        return cat.lambda_w, cat.lambda_h


def compensate(box: BBox, cfg: BiasConfig) -> BBox:
    """Enlarge ``box`` about its center, then clip the corners to the frame."""
    lw, lh = cfg.lambdas(box)
    area = box.w * box.h
    w = box.w + lw * area
    h = box.h + lh * area
    x1, x2 = box.cx - w / 2, box.cx + w / 2
    y1, y2 = box.cy - h / 2, box.cy + h / 2
    if 0.0 <= x1 and x2 <= 1.0 and 0.0 <= y1 and y2 <= 1.0:
        return BBox(box.cx, box.cy, w, h)
    out = BBox.from_corners(x1, y1, x2, y2)
    # the corner -> center round trip can lose an ulp; widen until the input is covered
    for _ in range(8):
        if containment(box, out):
            break
        out = BBox(out.cx, out.cy, min(math.nextafter(out.w, 2.0), 1.0), min(math.nextafter(out.h, 2.0), 1.0))
    return out


def compensate_all(dets: Iterable, cfg: BiasConfig) -> list:
    """Apply :func:`compensate` to every detection's box; other fields untouched."""
    return [replace(d, bbox=compensate(d.bbox, cfg)) for d in dets]


def load_bias_config(path) -> BiasConfig:
    """Read a key=value file.

    Keys: ``mode``, ``lambda_w``, ``lambda_h`` and repeated
    ``category=name,wmin,wmax,hmin,hmax,lambda_w,lambda_h`` rows, which
    replace the built-in table when present. ``#`` starts a comment.
    """
    values: dict[str, str] = {}
    rows: list[SizeCategory] = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "category":
            parts = [p.strip() for p in value.split(",")]
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: category rows need 7 comma-separated fields")
            try:
                nums = [float(p) for p in parts[1:]]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            rows.append(SizeCategory(parts[0], (nums[0], nums[1]), (nums[2], nums[3]), nums[4], nums[5]))
        elif key in ("mode", "lambda_w", "lambda_h"):
            values[key] = value
        else:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
    kwargs = {}
    if "mode" in values:
        kwargs["mode"] = values["mode"]
    if "lambda_w" in values:
        kwargs["fixed_lambda_w"] = float(values["lambda_w"])
    if "lambda_h" in values:
        kwargs["fixed_lambda_h"] = float(values["lambda_h"])
    if rows:
        kwargs["categories"] = tuple(rows)
    return BiasConfig(**kwargs)
