"""Normalized boxes, head decoding, confidence filtering and NMS."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .net.model import STRIDES, NetworkConfig
from .numeric import ShapeError, Tensor


@dataclass(frozen=True)
class BBox:
    """Center-format box normalized to the image extent."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        for name in ("cx", "cy", "w", "h"):
            v = getattr(self, name)
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise ValueError(f"BBox.{name}={v} outside [0, 1]")

    def corners(self) -> tuple[float, float, float, float]:
        """(x1, y1, x2, y2) clamped to the unit square."""
        return (
            min(max(self.cx - self.w / 2, 0.0), 1.0),
            min(max(self.cy - self.h / 2, 0.0), 1.0),
            min(max(self.cx + self.w / 2, 0.0), 1.0),
            min(max(self.cy + self.h / 2, 0.0), 1.0),
        )

    @property
    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return (x2 - x1) * (y2 - y1)

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        x1, x2 = (min(max(v, 0.0), 1.0) for v in (x1, x2))
        y1, y2 = (min(max(v, 0.0), 1.0) for v in (y1, y2))
        return cls((x1 + x2) / 2, (y1 + y2) / 2, max(x2 - x1, 0.0), max(y2 - y1, 0.0))


@dataclass(frozen=True)
class Detection:
    bbox: BBox
    confidence: float
    class_id: int = 0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")


@dataclass(frozen=True)
class Annotation:
    bbox: BBox
    class_id: int = 0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("class_id must be non-negative")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 whenever either box has zero area."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return min(inter / (area_a + area_b - inter), 1.0)


def containment(inner: BBox, outer: BBox) -> bool:
    """True iff every corner of ``inner`` lies in ``outer`` (closed bounds)."""
    ix1, iy1, ix2, iy2 = inner.corners()
    ox1, oy1, ox2, oy2 = outer.corners()
    return ox1 <= ix1 and oy1 <= iy1 and ix2 <= ox2 and iy2 <= oy2


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def decode_head(head: Mapping[int, Tensor], config: NetworkConfig, anchors) -> list[Detection]:
    """Anchor-grid decoding of raw head output into boxes.

    Per cell (gx, gy) and anchor (aw, ah), in input pixels::

        cx = (2·σ(tx) − 0.5 + gx) · stride / S        w = (2·σ(tw))² · aw / S

    and analogously for y/h; confidence = σ(obj) · max_k σ(cls_k). Output
    order: stride, then gx, then gy, then anchor.
    """
    anchors = np.asarray(anchors.data if isinstance(anchors, Tensor) else anchors, dtype=np.float64)
    a, k, s_in = config.anchors_per_scale, config.class_count, config.input_size
    if anchors.shape != (len(STRIDES), a, 2):
        raise ShapeError(f"decode_head: anchors must have shape {(len(STRIDES), a, 2)}, got {anchors.shape}")
    dets: list[Detection] = []
    for si, stride in enumerate(STRIDES):
        if stride not in head:
            raise ShapeError(f"decode_head: missing stride-{stride} output")
        g = config.grid(stride)
        raw = head[stride].data
        if raw.shape != (g, g, a * (5 + k)):
            raise ShapeError(f"decode_head: stride-{stride} output must be {(g, g, a * (5 + k))}, got {raw.shape}")
        p = _sigmoid(raw.reshape(g, g, a, 5 + k))
        gx = np.arange(g)[:, None, None]
        gy = np.arange(g)[None, :, None]
        cx = (p[..., 0] * 2 - 0.5 + gx) * stride / s_in
        cy = (p[..., 1] * 2 - 0.5 + gy) * stride / s_in
        w = (p[..., 2] * 2) ** 2 * anchors[si, :, 0] / s_in
        h = (p[..., 3] * 2) ** 2 * anchors[si, :, 1] / s_in
        cls = p[..., 5:]
        conf = p[..., 4] * cls.max(axis=-1)
        cid = cls.argmax(axis=-1)
        for i in range(g):
            for j in range(g):
                for n in range(a):
                    box = BBox.from_corners(cx[i, j, n] - w[i, j, n] / 2, cy[i, j, n] - h[i, j, n] / 2,
                                            cx[i, j, n] + w[i, j, n] / 2, cy[i, j, n] + h[i, j, n] / 2)
                    dets.append(Detection(box, float(conf[i, j, n]), int(cid[i, j, n])))
    return dets


def confidence_filter(dets: Iterable[Detection], threshold: float) -> list[Detection]:
    return [d for d in dets if d.confidence >= threshold]


def nms(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy class-aware suppression; survivors come out in descending confidence."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.class_id != d.class_id or iou(k.bbox, d.bbox) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def with_bbox(det, bbox: BBox):
    return replace(det, bbox=bbox)
