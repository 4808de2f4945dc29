"""Sequence-level alarm analysis.

A drone counts as found in a window of frames if it is detected in at least
one of them. Window FNR is the share of all-ground-truth windows with no
detection at all.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

from .detections import Annotation, Detection
from .metrics import MatchingConfig, match_detections

DEFAULT_SIZES = (1, 5, 11, 17, 21, 27)
POLICIES = ("sliding", "disjoint")


class NoPositiveWindowsWarning(UserWarning):
    """No window had ground truth in every frame; FNR reported as 0."""


@dataclass(frozen=True)
class FrameDetectionSeq:
    frames: tuple[tuple[bool, bool], ...]  # (gt_present, detected)
    source_id: str = ""

    def __post_init__(self):
        if not self.frames:
            raise ValueError("a frame sequence must not be empty")

    def __len__(self) -> int:
        return len(self.frames)


@dataclass(frozen=True)
class AlarmCurve:
    points: tuple[tuple[int, float], ...]

    def lines(self) -> list[str]:
        return [f"{size} {value:.12g}" for size, value in self.points]


def _windows(n: int, size: int, policy: str) -> range:
    if policy == "sliding":
        return range(0, n - size + 1)
    if policy == "disjoint":
        return range(0, n - size + 1, size)
    raise ValueError(f"window policy must be one of {POLICIES}, got {policy!r}")


def window_counts(seq: FrameDetectionSeq, size: int, policy: str = "sliding") -> tuple[int, int]:
    """(missed, positive) window counts.

    Prefix sums over gt/detection flags make each window O(1).
    """
    n = len(seq)
    if not 1 <= size <= n:
        raise ValueError(f"window size {size} must lie in [1, {n}]")
    gt_pre, det_pre = [0], [0]
    for gt, det in seq.frames:
        gt_pre.append(gt_pre[-1] + bool(gt))
        det_pre.append(det_pre[-1] + bool(gt and det))
    missed = positive = 0
    for start in _windows(n, size, policy):
        end = start + size
        if gt_pre[end] - gt_pre[start] != size:
            continue
        positive += 1
        if det_pre[end] == det_pre[start]:
            missed += 1
    return missed, positive


def window_fnr(seq: FrameDetectionSeq, size: int, policy: str = "sliding") -> float:
    missed, positive = window_counts(seq, size, policy)
    if positive == 0:
        warnings.warn(f"no all-ground-truth windows of size {size}; FNR set to 0", NoPositiveWindowsWarning,
                      stacklevel=2)
        return 0.0
    return missed / positive


def alarm_curve(seq: FrameDetectionSeq, sizes: Sequence[int] = DEFAULT_SIZES, policy: str = "sliding") -> AlarmCurve:
    sizes = list(sizes)
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("window sizes must be strictly increasing")
    return AlarmCurve(tuple((s, window_fnr(seq, s, policy)) for s in sizes))


def sequence_from_eval(
    frame_keys: Sequence,
    dets: Mapping[object, Sequence[Detection]],
    gts: Mapping[object, Sequence[Annotation]],
    cfg: MatchingConfig | None = None,
    source_id: str = "",
) -> FrameDetectionSeq:
    """Per-frame (gt_present, has_true_positive) flags for frames in index order."""
    cfg = cfg or MatchingConfig()
    keys = list(frame_keys)
    if any(b <= a for a, b in zip(keys, keys[1:])):
        raise ValueError("frame keys must be strictly increasing (ordered, no duplicates)")
    frames = []
    for k in keys:
        gt = list(gts.get(k, ()))
        kept = [d for d in dets.get(k, ()) if d.confidence >= cfg.confidence_threshold]
        m = match_detections(kept, gt, cfg.iou_threshold)
        frames.append((bool(gt), m.counts.tp > 0))
    return FrameDetectionSeq(tuple(frames), source_id)


def parse_sequence(text: str, source_id: str = "") -> FrameDetectionSeq:
    """Parse ``frame_index gt_flag det_flag`` lines (flags 0/1), sorted by frame index."""
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ValueError(f"line {lineno}: expected 'frame_index gt_flag det_flag'")
        try:
            idx, gt, det = (int(p) for p in parts)
        except ValueError as exc:
            raise ValueError(f"line {lineno}: {exc}") from exc
        if gt not in (0, 1) or det not in (0, 1):
            raise ValueError(f"line {lineno}: flags must be 0 or 1")
        rows.append((idx, bool(gt), bool(det)))
    idxs = [r[0] for r in rows]
    if len(set(idxs)) != len(idxs):
        raise ValueError("duplicate frame index")
    rows.sort()
    return FrameDetectionSeq(tuple((gt, det) for _, gt, det in rows), source_id)


def format_sequence(seq: FrameDetectionSeq) -> str:
    return "".join(f"{i} {int(gt)} {int(det)}\n" for i, (gt, det) in enumerate(seq.frames))
