"""Detection evaluation: greedy matching, AP/mAP, FNR, FDR, containment rate."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .detections import Annotation, Detection, containment, iou

DEFAULT_IOU_THRESHOLDS = (0.25, 0.5)
DEFAULT_CONFIDENCE = 0.25
# IoU threshold at which FNR, FDR and containment are reported
COUNT_IOU = 0.5


@dataclass(frozen=True)
class MatchingConfig:
    iou_threshold: float = COUNT_IOU
    confidence_threshold: float = DEFAULT_CONFIDENCE

    def __post_init__(self):
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValueError(f"confidence_threshold must lie in [0, 1], got {self.confidence_threshold}")


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class ImageMatch:
    """Matching result for one image.

    ``matches[i]`` is the index of the ground truth assigned to detection i,
    or None for a false positive.
    """

    counts: ConfusionCounts
    matches: list[int | None]

    @property
    def flags(self) -> list[bool]:
        return [m is not None for m in self.matches]


@dataclass
class EvalReport:
    map_at: dict[float, float]
    fnr: float
    fdr: float
    containment_rate: float
    counts: ConfusionCounts
    per_class_ap: dict[float, dict[int, float]] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"map@{t:g}={v:.12g}" for t, v in sorted(self.map_at.items())]
        out += [
            f"fnr={self.fnr:.12g}",
            f"fdr={self.fdr:.12g}",
            f"containment_rate={self.containment_rate:.12g}",
            f"tp={self.counts.tp}",
            f"fp={self.counts.fp}",
            f"fn={self.counts.fn}",
        ]
        return out

    def to_dict(self) -> dict:
        return {
            "map": {f"{t:g}": v for t, v in sorted(self.map_at.items())},
            "fnr": self.fnr,
            "fdr": self.fdr,
            "containment_rate": self.containment_rate,
            "counts": {"tp": self.counts.tp, "fp": self.counts.fp, "fn": self.counts.fn},
        }


def _confidence_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))


def match_detections(dets: Sequence[Detection], gts: Sequence[Annotation], iou_threshold: float) -> ImageMatch:
    """Greedy one-to-one matching in descending confidence for one image.

    Each detection takes the unmatched same-class ground truth of highest IoU
    (earliest index on ties) if that IoU reaches the threshold.
    """
    taken = [False] * len(gts)
    matches: list[int | None] = [None] * len(dets)
    for i in _confidence_order(dets):
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if taken[j] or gt.class_id != dets[i].class_id:
                continue
            v = iou(dets[i].bbox, gt.bbox)
            if v > best_iou:
                best, best_iou = j, v
        if best is not None and best_iou >= iou_threshold:
            taken[best] = True
            matches[i] = best
    tp = sum(m is not None for m in matches)
    return ImageMatch(ConfusionCounts(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp), matches)


def fnr(c: ConfusionCounts) -> float:
    """fn / (fn + tp); 0 when there is no ground truth."""
    d = c.fn + c.tp
    return c.fn / d if d else 0.0


def fdr(c: ConfusionCounts) -> float:
    """fp / (fp + tp); 0 when there are no detections."""
    d = c.fp + c.tp
    return c.fp / d if d else 0.0


def average_precision(scored: Sequence[tuple[float, bool]], gt_count: int) -> float:
    """All-point interpolated AP from (confidence, is_tp) pairs.

    Pairs are ranked by descending confidence with the given order breaking
    ties; precision is made monotone non-increasing before integrating over
    recall.
    """
    if gt_count == 0:
        return 1.0 if not scored else 0.0
    ranked = sorted(range(len(scored)), key=lambda i: (-scored[i][0], i))
    recalls, precisions = [], []
    tp = 0
    for rank, i in enumerate(ranked, start=1):
        tp += scored[i][1]
        recalls.append(tp / gt_count)
        precisions.append(tp / rank)
    for k in range(len(precisions) - 2, -1, -1):
        precisions[k] = max(precisions[k], precisions[k + 1])
    ap, prev_r = 0.0, 0.0
    for r, p in zip(recalls, precisions):
        if r > prev_r:
            ap += (r - prev_r) * p
            prev_r = r
    return ap


def mean_ap(per_class: Mapping[int, float] | Sequence[float]) -> float:
    values = list(per_class.values()) if isinstance(per_class, Mapping) else list(per_class)
    if not values:
        raise ValueError("mean_ap needs at least one class")
    return sum(values) / len(values)


def containment_rate(dets: Sequence[Detection], gts: Sequence[Annotation], match: ImageMatch) -> float:
    """Fraction of matched detections lying entirely inside their matched ground truth."""
    pairs = [(dets[i].bbox, gts[j].bbox) for i, j in enumerate(match.matches) if j is not None]
    if not pairs:
        return 0.0
    return sum(containment(d, g) for d, g in pairs) / len(pairs)


def evaluate(
    dets: Mapping[str, Sequence[Detection]],
    gts: Mapping[str, Sequence[Annotation]],
    thresholds: Sequence[float] = DEFAULT_IOU_THRESHOLDS,
    cfg: MatchingConfig | None = None,
) -> EvalReport:
    """Evaluate a dataset keyed by image id.

    mAP uses every detection; FNR, FDR and containment use detections at or
    above ``cfg.confidence_threshold`` matched at ``cfg.iou_threshold``.
    Images are processed in sorted key order, so the result does not depend
    on mapping order.
    """
    cfg = cfg or MatchingConfig()
    for key in dets:
        if key not in gts:
            raise KeyError(f"image {key!r} has detections but no ground-truth entry")
    for key in gts:
        if key not in dets:
            raise KeyError(f"image {key!r} has ground truth but no detection entry")
    keys = sorted(gts)

    classes = sorted({a.class_id for k in keys for a in gts[k]} | {d.class_id for k in keys for d in dets[k]})
    map_at: dict[float, float] = {}
    per_class_ap: dict[float, dict[int, float]] = {}
    for t in thresholds:
        scored: dict[int, list[tuple[float, bool]]] = {c: [] for c in classes}
        gt_count = {c: 0 for c in classes}
        for key in keys:
            m = match_detections(dets[key], gts[key], t)
            order = _confidence_order(dets[key])
            for i in order:
                scored[dets[key][i].class_id].append((dets[key][i].confidence, m.matches[i] is not None))
            for a in gts[key]:
                gt_count[a.class_id] += 1
        aps = {c: average_precision(scored[c], gt_count[c]) for c in classes}
        per_class_ap[t] = aps
        map_at[t] = mean_ap(aps) if aps else 1.0

    counts = ConfusionCounts()
    contained, matched = 0, 0
    for key in keys:
        kept = [d for d in dets[key] if d.confidence >= cfg.confidence_threshold]
        m = match_detections(kept, gts[key], cfg.iou_threshold)
        counts = counts + m.counts
        for i, j in enumerate(m.matches):
            if j is not None:
                matched += 1
                contained += containment(kept[i].bbox, gts[key][j].bbox)
    return EvalReport(
        map_at=map_at,
        fnr=fnr(counts),
        fdr=fdr(counts),
        containment_rate=contained / matched if matched else 0.0,
        counts=counts,
        per_class_ap=per_class_ap,
    )
