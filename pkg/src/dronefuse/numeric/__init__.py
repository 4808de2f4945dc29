"""Float64 tensor substrate with reverse-mode gradients."""
from .ops import (
    add,
    batch_norm_inference,
    broadcast_mul,
    channel_pool,
    concat_channels,
    conv2d,
    global_pool,
    linear,
    mul,
    pool2d,
    relu,
    scale,
    sigmoid,
    silu,
    slice_channels,
    sum,
    upsample_nearest,
)
from .tensor import ShapeError, Tape, Tensor, backward, finite_difference_gradient, relative_error

__all__ = [
    "Tensor", "Tape", "ShapeError", "backward", "finite_difference_gradient", "relative_error",
    "add", "batch_norm_inference", "broadcast_mul", "channel_pool", "concat_channels", "conv2d",
    "global_pool", "linear", "mul", "pool2d", "relu", "scale", "sigmoid", "silu",
    "slice_channels", "sum", "upsample_nearest",
]
