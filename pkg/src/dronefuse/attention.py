"""CBAM and post-concatenation channel attention.

Channel map: sigmoid(MLP(avg_pool(F)) + MLP(max_pool(F))) with one shared
two-layer ReLU MLP. Spatial map: sigmoid(conv7x7([mean_c(F), max_c(F)])).
CBAM refinement nests them: G = M_C(F) * F, then F' = M_S(G) * G.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numeric import (
    ShapeError,
    Tensor,
    add,
    broadcast_mul,
    channel_pool,
    concat_channels,
    conv2d,
    global_pool,
    linear,
    relu,
    sigmoid,
)

DEFAULT_REDUCTION = 4


def hidden_width(channels: int, reduction: int) -> int:
    return max(1, channels // reduction)


@dataclass(frozen=True)
class ChannelAttentionParams:
    reduction_ratio: int
    mlp_w1: Tensor  # C × hidden
    mlp_b1: Tensor
    mlp_w2: Tensor  # hidden × C
    mlp_b2: Tensor

    def __post_init__(self):
        c, hid = self.mlp_w1.shape
        if self.mlp_b1.shape != (hid,) or self.mlp_w2.shape != (hid, c) or self.mlp_b2.shape != (c,):
            raise ShapeError(
                f"inconsistent channel-attention MLP: w1 {self.mlp_w1.shape}, b1 {self.mlp_b1.shape}, "
                f"w2 {self.mlp_w2.shape}, b2 {self.mlp_b2.shape}"
            )

    @property
    def channels(self) -> int:
        return self.mlp_w1.shape[0]

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {
            f"{prefix}mlp_w1": self.mlp_w1,
            f"{prefix}mlp_b1": self.mlp_b1,
            f"{prefix}mlp_w2": self.mlp_w2,
            f"{prefix}mlp_b2": self.mlp_b2,
        }

    @classmethod
    def from_tensors(cls, params: dict[str, Tensor], prefix: str = "") -> "ChannelAttentionParams":
        w1 = params[f"{prefix}mlp_w1"]
        c, hid = w1.shape
        return cls(
            reduction_ratio=max(1, c // hid),
            mlp_w1=w1,
            mlp_b1=params[f"{prefix}mlp_b1"],
            mlp_w2=params[f"{prefix}mlp_w2"],
            mlp_b2=params[f"{prefix}mlp_b2"],
        )


@dataclass(frozen=True)
class SpatialAttentionParams:
    kernel: Tensor  # k × k × 2 × 1
    bias: Tensor

    def __post_init__(self):
        k = self.kernel.shape
        if len(k) != 4 or k[0] != k[1] or k[0] % 2 == 0 or k[2:] != (2, 1) or self.bias.shape != (1,):
            raise ShapeError(f"spatial attention expects an odd k×k×2×1 kernel and one bias, got {k}, {self.bias.shape}")

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {f"{prefix}kernel": self.kernel, f"{prefix}bias": self.bias}

    @classmethod
    def from_tensors(cls, params: dict[str, Tensor], prefix: str = "") -> "SpatialAttentionParams":
        return cls(kernel=params[f"{prefix}kernel"], bias=params[f"{prefix}bias"])


@dataclass(frozen=True)
class CBAMParams:
    channel: ChannelAttentionParams
    spatial: SpatialAttentionParams

    def tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {**self.channel.tensors(f"{prefix}channel."), **self.spatial.tensors(f"{prefix}spatial.")}

    @classmethod
    def from_tensors(cls, params: dict[str, Tensor], prefix: str = "") -> "CBAMParams":
        return cls(
            channel=ChannelAttentionParams.from_tensors(params, f"{prefix}channel."),
            spatial=SpatialAttentionParams.from_tensors(params, f"{prefix}spatial."),
        )


def init_channel_attention(channels: int, rng: np.random.Generator, reduction: int = DEFAULT_REDUCTION,
                           low: float = -0.5, high: float = 0.5) -> ChannelAttentionParams:
    hid = hidden_width(channels, reduction)
    u = lambda *shape: Tensor(rng.uniform(low, high, size=shape))  # noqa: E731
    return ChannelAttentionParams(reduction, u(channels, hid), u(hid), u(hid, channels), u(channels))


def init_spatial_attention(rng: np.random.Generator, kernel_size: int = 7,
                           low: float = -0.5, high: float = 0.5) -> SpatialAttentionParams:
    return SpatialAttentionParams(
        Tensor(rng.uniform(low, high, size=(kernel_size, kernel_size, 2, 1))),
        Tensor(rng.uniform(low, high, size=(1,))),
    )


def init_cbam(channels: int, rng: np.random.Generator, reduction: int = DEFAULT_REDUCTION) -> CBAMParams:
    return CBAMParams(init_channel_attention(channels, rng, reduction), init_spatial_attention(rng))


def _mlp(x: Tensor, p: ChannelAttentionParams) -> Tensor:
    return linear(relu(linear(x, p.mlp_w1, p.mlp_b1)), p.mlp_w2, p.mlp_b2)


def channel_attention(F: Tensor, p: ChannelAttentionParams) -> Tensor:
    """1×1×C attention map over the channels of ``F``."""
    if F.shape[-1] != p.channels:
        raise ShapeError(f"channel_attention: feature has {F.shape[-1]} channels, params expect {p.channels}")
    return sigmoid(add(_mlp(global_pool(F, "avg"), p), _mlp(global_pool(F, "max"), p)))


def spatial_attention(F: Tensor, p: SpatialAttentionParams) -> Tensor:
    """W×H×1 attention map; padding keeps the spatial extent."""
    pooled = concat_channels(channel_pool(F, "avg"), channel_pool(F, "max"))
    pad = p.kernel.shape[0] // 2
    return sigmoid(conv2d(pooled, p.kernel, p.bias, stride=1, padding=pad))


def cbam_forward(F: Tensor, p: CBAMParams) -> Tensor:
    refined = broadcast_mul(channel_attention(F, p.channel), F)
    return broadcast_mul(spatial_attention(refined, p.spatial), refined)


def fused_concat_attention(F: Tensor, seg: Tensor, p: ChannelAttentionParams) -> Tensor:
    """Concatenate a one-channel segmentation map onto ``F`` and reweight channels."""
    if seg.shape[-1] != 1:
        raise ShapeError(f"fused_concat_attention: segmentation map must have one channel, got {seg.shape}")
    if F.shape[:-1] != seg.shape[:-1]:
        raise ShapeError(f"fused_concat_attention: spatial extents differ, feature {F.shape} vs map {seg.shape}")
    if np.any(seg.data < 0) or np.any(seg.data > 1):
        raise ValueError("fused_concat_attention: segmentation map values must lie in [0, 1]")
    stacked = concat_channels(F, seg)
    return broadcast_mul(channel_attention(stacked, p), stacked)
