"""Toy-scale dual-backbone detector.

Data flow::

    x ──> backbone stub ──> p3, p4, p5 ──┐
    x ──> segmentation stub ──> seg ─────┴─> PAN neck (seg fused at 3 scales) ──> head

The neck runs top-down (p5 -> p4 -> p3) then bottom-up. Before each of the
three output C3+CBAM blocks, the concatenated features receive the
segmentation map, average-pooled to that scale, through
:func:`fused_concat_attention`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..attention import ChannelAttentionParams, DEFAULT_REDUCTION, fused_concat_attention, init_channel_attention
from ..numeric import ShapeError, Tensor, concat_channels, conv2d, pool2d, sigmoid, upsample_nearest
from .blocks import c3_forward, cbs_forward, init_c3, init_cbs, init_sppf, sppf_forward

STRIDES = (8, 16, 32)

# YOLOv5 default anchors in pixels at 640 input, per stride
_BASE_ANCHORS = {
    8: ((10, 13), (16, 30), (33, 23)),
    16: ((30, 61), (62, 45), (59, 119)),
    32: ((116, 90), (156, 198), (373, 326)),
}


@dataclass(frozen=True)
class NetworkConfig:
    input_size: int = 64
    base_channels: int = 8
    anchors_per_scale: int = 3
    class_count: int = 1
    reduction_ratio: int = DEFAULT_REDUCTION

    def __post_init__(self):
        for name in ("input_size", "base_channels", "anchors_per_scale", "class_count", "reduction_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.input_size % 32:
            raise ValueError(f"input_size must be divisible by 32, got {self.input_size}")

    @property
    def widths(self) -> dict[int, int]:
        """Channel width of the pyramid / neck output at each stride."""
        c = self.base_channels
        return {8: 2 * c, 16: 4 * c, 32: 8 * c}

    @property
    def head_channels(self) -> int:
        return self.anchors_per_scale * (5 + self.class_count)

    def grid(self, stride: int) -> int:
        return self.input_size // stride


@dataclass(frozen=True)
class FeaturePyramid:
    p3: Tensor
    p4: Tensor
    p5: Tensor


@dataclass(frozen=True)
class SegMap:
    map: Tensor

    def __post_init__(self):
        d = self.map.data
        if d.ndim != 3 or d.shape[2] != 1 or d.shape[0] != d.shape[1]:
            raise ShapeError(f"segmentation map must be S×S×1, got {self.map.shape}")
        if np.any(d < 0) or np.any(d > 1):
            raise ValueError("segmentation map values must lie in [0, 1]")


# stride -> raw prediction tensor (S/s × S/s × A·(5+K))
HeadOutput = dict


def default_anchors(config: NetworkConfig) -> np.ndarray:
    """(3, A, 2) anchor sizes in input pixels, rescaled from the 640 defaults."""
    a = config.anchors_per_scale
    if a > 3:
        raise ValueError("default anchors cover at most 3 per scale; supply anchors explicitly")
    factor = config.input_size / 640.0
    return np.array([[_BASE_ANCHORS[s][i] for i in range(a)] for s in STRIDES], dtype=np.float64) * factor


def _check_input(x: Tensor, config: NetworkConfig) -> None:
    s = config.input_size
    if x.shape != (s, s, 3):
        raise ShapeError(f"input must be {s}×{s}×3 for this config, got {x.shape}")


# -- stages -----------------------------------------------------------------

def yolo_backbone_stub(x: Tensor, params: Mapping[str, Tensor], config: NetworkConfig) -> FeaturePyramid:
    """Two stride-2 CBS stems, then one CBS downsample + C3 per level; SPPF closes the last level."""
    _check_input(x, config)
    y = cbs_forward(x, params, "backbone.stem0", stride=2)
    y = cbs_forward(y, params, "backbone.stem1", stride=2)
    levels = []
    for s in STRIDES:
        y = cbs_forward(y, params, f"backbone.down{s}", stride=2)
        y = c3_forward(y, params, f"backbone.c3_{s}", with_cbam=False, shortcut=True)
        levels.append(y)
    p5 = sppf_forward(levels[2], params, "backbone.sppf")
    return FeaturePyramid(levels[0], levels[1], p5)


def feder_stub(x: Tensor, params: Mapping[str, Tensor], config: NetworkConfig) -> SegMap:
    """Stand-in for the camouflage segmenter: CBS then a sigmoid-terminated 3x3 conv."""
    _check_input(x, config)
    y = cbs_forward(x, params, "feder.cv1")
    w = params["feder.out.weight"]
    return SegMap(sigmoid(conv2d(y, w, params["feder.out.bias"], stride=1, padding=w.shape[0] // 2)))


def _seg_at(seg: Tensor, stride: int) -> Tensor:
    return pool2d(seg, "avg", stride, stride, 0)


def _fuse(name: str, feature: Tensor, seg: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    try:
        return fused_concat_attention(feature, seg, ChannelAttentionParams.from_tensors(params, f"neck.{name}."))
    except ShapeError as exc:
        raise ShapeError(f"fusion point {name}: {exc}") from exc


def neck_forward(pyr: FeaturePyramid, seg: SegMap, params: Mapping[str, Tensor],
                 config: NetworkConfig) -> dict[int, Tensor]:
    s = config.input_size
    if seg.map.shape != (s, s, 1):
        raise ShapeError(f"neck: segmentation map must be {s}×{s}×1, got {seg.map.shape}")
    for name, t, stride in (("p3", pyr.p3, 8), ("p4", pyr.p4, 16), ("p5", pyr.p5, 32)):
        g = config.grid(stride)
        if t.shape[:2] != (g, g):
            raise ShapeError(f"neck: pyramid level {name} must be {g}×{g}, got {t.shape}")

    # top-down
    lat5 = cbs_forward(pyr.p5, params, "neck.lat5")
    td4 = c3_forward(concat_channels(upsample_nearest(lat5, 2), pyr.p4), params, "neck.td4",
                     with_cbam=True, shortcut=False)
    lat4 = cbs_forward(td4, params, "neck.lat4")

    # bottom-up, segmentation map injected at every output scale
    f3 = _fuse("fuse8", concat_channels(upsample_nearest(lat4, 2), pyr.p3), _seg_at(seg.map, 8), params)
    out8 = c3_forward(f3, params, "neck.out8", with_cbam=True, shortcut=False)
    f4 = _fuse("fuse16", concat_channels(cbs_forward(out8, params, "neck.down8", stride=2), lat4),
               _seg_at(seg.map, 16), params)
    out16 = c3_forward(f4, params, "neck.out16", with_cbam=True, shortcut=False)
    f5 = _fuse("fuse32", concat_channels(cbs_forward(out16, params, "neck.down16", stride=2), lat5),
               _seg_at(seg.map, 32), params)
    out32 = c3_forward(f5, params, "neck.out32", with_cbam=True, shortcut=False)
    return {8: out8, 16: out16, 32: out32}


def head_forward(fused: Mapping[int, Tensor], params: Mapping[str, Tensor], config: NetworkConfig) -> HeadOutput:
    """One 1x1 convolution per scale."""
    out = {}
    for s in STRIDES:
        if s not in fused:
            raise ShapeError(f"head: missing stride-{s} map")
        out[s] = conv2d(fused[s], params[f"head.p{s}.weight"], params[f"head.p{s}.bias"])
    return out


def full_forward(x: Tensor, checkpoint) -> HeadOutput:
    """Both backbones on ``x``, then neck and head, using ``checkpoint.params``."""
    params, config = checkpoint.params, checkpoint.config
    stages = (
        ("backbone", lambda: yolo_backbone_stub(x, params, config)),
        ("feder", lambda: feder_stub(x, params, config)),
    )
    results = {}
    for name, fn in stages:
        results[name] = _staged(name, fn)
    fused = _staged("neck", lambda: neck_forward(results["backbone"], results["feder"], params, config))
    return _staged("head", lambda: head_forward(fused, params, config))


def _staged(name, fn):
    try:
        return fn()
    except ShapeError as exc:
        raise ShapeError(f"[{name}] {exc}") from exc
    except KeyError as exc:
        raise KeyError(f"[{name}] missing parameter {exc.args[0]}") from exc


# -- parameters -------------------------------------------------------------

def init_params(config: NetworkConfig, seed: int | None = 0, zero: bool = False) -> dict[str, Tensor]:
    """Seeded parameters for every block.

    ``zero=True`` gives zero convolution and attention weights with identity
    batch norm, so every sigmoid in the network starts at 0.5.
    """
    rng = None if zero else np.random.default_rng(seed)
    c = config.base_channels
    w = config.widths
    r = config.reduction_ratio
    p: dict[str, Tensor] = {}

    init_cbs(p, "backbone.stem0", 3, c, 3, rng)
    init_cbs(p, "backbone.stem1", c, c, 3, rng)
    prev = c
    for s in STRIDES:
        init_cbs(p, f"backbone.down{s}", prev, w[s], 3, rng)
        init_c3(p, f"backbone.c3_{s}", w[s], w[s], rng)
        prev = w[s]
    init_sppf(p, "backbone.sppf", w[32], w[32], rng)

    init_cbs(p, "feder.cv1", 3, c, 3, rng)
    if rng is None:
        p["feder.out.weight"] = Tensor(np.zeros((3, 3, c, 1)))
        p["feder.out.bias"] = Tensor(np.zeros(1))
    else:
        bound = np.sqrt(6.0 / (9 * c))
        p["feder.out.weight"] = Tensor(rng.uniform(-bound, bound, size=(3, 3, c, 1)))
        p["feder.out.bias"] = Tensor(rng.uniform(-0.1, 0.1, size=1))

    init_cbs(p, "neck.lat5", w[32], w[16], 1, rng)
    init_c3(p, "neck.td4", 2 * w[16], w[16], rng, with_cbam=True, reduction=r)
    init_cbs(p, "neck.lat4", w[16], w[8], 1, rng)
    fuse_in = {8: 2 * w[8], 16: 2 * w[8], 32: 2 * w[16]}
    for s in STRIDES:
        ch = fuse_in[s] + 1
        ca = init_channel_attention(ch, rng if rng is not None else np.random.default_rng(0), r)
        for name, t in ca.tensors(f"neck.fuse{s}.").items():
            p[name] = t if rng is not None else Tensor(np.zeros(t.shape))
        init_c3(p, f"neck.out{s}", ch, w[s], rng, with_cbam=True, reduction=r)
    init_cbs(p, "neck.down8", w[8], w[8], 3, rng)
    init_cbs(p, "neck.down16", w[16], w[16], 3, rng)

    for s in STRIDES:
        if rng is None:
            p[f"head.p{s}.weight"] = Tensor(np.zeros((1, 1, w[s], config.head_channels)))
            p[f"head.p{s}.bias"] = Tensor(np.zeros(config.head_channels))
        else:
            bound = np.sqrt(6.0 / w[s])
            p[f"head.p{s}.weight"] = Tensor(rng.uniform(-bound, bound, size=(1, 1, w[s], config.head_channels)))
            p[f"head.p{s}.bias"] = Tensor(rng.uniform(-0.1, 0.1, size=config.head_channels))
    p["head.anchors"] = Tensor(default_anchors(config))
    return p
