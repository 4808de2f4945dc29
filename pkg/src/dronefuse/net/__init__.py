"""Fusion network: blocks, stub backbones, neck, head and checkpoints."""
from .blocks import bottleneck_forward, c3_forward, cbs_forward, sppf_forward
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from .model import (
    STRIDES,
    FeaturePyramid,
    NetworkConfig,
    SegMap,
    default_anchors,
    feder_stub,
    full_forward,
    head_forward,
    init_params,
    neck_forward,
    yolo_backbone_stub,
)

__all__ = [
    "STRIDES", "Checkpoint", "CheckpointError", "FeaturePyramid", "NetworkConfig", "SegMap",
    "bottleneck_forward", "c3_forward", "cbs_forward", "decode_checkpoint", "default_anchors",
    "encode_checkpoint", "feder_stub", "full_forward", "head_forward", "init_params",
    "load_checkpoint", "neck_forward", "save_checkpoint", "sppf_forward", "yolo_backbone_stub",
]
