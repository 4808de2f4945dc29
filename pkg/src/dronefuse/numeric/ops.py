"""Forward ops with reverse-mode rules.

Spatial ops take (W, H, C) or (N, W, H, C) tensors. Padding is zero padding,
except that max pooling pads with -inf so padded cells never win; average
pooling divides by the full window area, padded zeros included.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record

__all__ = [
    "add", "mul", "scale", "sum", "relu", "sigmoid", "silu", "linear",
    "conv2d", "batch_norm_inference", "pool2d", "global_pool", "channel_pool",
    "upsample_nearest", "concat_channels", "slice_channels", "broadcast_mul",
]


def _spatial(x: Tensor, op: str) -> np.ndarray:
    """View of ``x`` as (N, W, H, C)."""
    if x.data.ndim == 3:
        return x.data[None]
    if x.data.ndim == 4:
        return x.data
    raise ShapeError(f"{op}: expected a W×H×C or N×W×H×C tensor, got shape {x.shape}")


def _unbatch(arr: np.ndarray, like: Tensor) -> np.ndarray:
    return arr[0] if like.data.ndim == 3 else arr


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# -- elementwise ------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    return record(out, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    out = Tensor._wrap(ad * bd)
    return record(out, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor._wrap(a.data * c)
    return record(out, (a,), lambda g: (g * c,))


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = Tensor._wrap(np.array(a.data.sum()))
    return record(out, (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor._wrap(np.where(mask, a.data, 0.0))
    return record(out, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    out = Tensor._wrap(s)
    return record(out, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    out = Tensor._wrap(x * s)
    return record(out, (a,), lambda g: (g * s * (1.0 + x * (1.0 - s)),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map over the last axis: x @ w + b, with w of shape (C_in, C_out)."""
    if w.data.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: x {x.shape}, w {w.shape}, b {b.shape} are incompatible")
    xd, wd = x.data, w.data
    out = Tensor._wrap(xd @ wd + b.data)

    def vjp(g):
        flat_x = xd.reshape(-1, xd.shape[-1])
        flat_g = g.reshape(-1, g.shape[-1])
        return g @ wd.T, flat_x.T @ flat_g, flat_g.sum(axis=0)

    return record(out, (x, w, b), vjp)


# -- windows ----------------------------------------------------------------

def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, W', H', C, k, k) strided view of a padded (N, W, H, C) array."""
    return sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]


def _scatter_windows(gwin: np.ndarray, padded_shape, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`_windows`: accumulate window gradients into the padded input."""
    gxp = np.zeros(padded_shape)
    wo, ho = gwin.shape[1], gwin.shape[2]
    for i in range(k):
        for j in range(k):
            gxp[:, i:i + stride * (wo - 1) + 1:stride, j:j + stride * (ho - 1) + 1:stride, :] += gwin[..., i, j]
    return gxp


def _out_extent(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation with a (k, k, C_in, C_out) kernel and zero padding."""
    x4 = _spatial(x, "conv2d")
    if kernels.data.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise ShapeError(f"conv2d: kernels must be k×k×C_in×C_out, got {kernels.shape}")
    k, _, cin, cout = kernels.shape
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel extent must be odd, got {k}")
    if x4.shape[3] != cin:
        raise ShapeError(f"conv2d: input has {x4.shape[3]} channels but kernels expect {cin} (input {x.shape}, kernels {kernels.shape})")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match C_out={cout}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be ≥ 1 and padding ≥ 0")
    n, w, h, _ = x4.shape
    if w + 2 * padding < k or h + 2 * padding < k:
        raise ShapeError(f"conv2d: {k}×{k} kernel does not fit input {x.shape} with padding {padding}")

    pw = ((0, 0), (padding, padding), (padding, padding), (0, 0))
    xp = np.pad(x4, pw)
    win = _windows(xp, k, stride)
    kd = kernels.data
    out4 = np.einsum("nxycij,ijco->nxyo", win, kd, optimize=True) + bias.data
    out = Tensor._wrap(_unbatch(out4, x))

    def vjp(g):
        g4 = g[None] if x.data.ndim == 3 else g
        gwin = np.einsum("nxyo,ijco->nxycij", g4, kd, optimize=True)
        gxp = _scatter_windows(gwin, xp.shape, k, stride)
        gx = gxp[:, padding:padding + w, padding:padding + h, :]
        gk = np.einsum("nxycij,nxyo->ijco", win, g4, optimize=True)
        return _unbatch(gx, x), gk, g4.sum(axis=(0, 1, 2))

    return record(out, (x, kernels, bias), vjp)


def batch_norm_inference(
    x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5
) -> Tensor:
    c = x.shape[-1]
    for name, p in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if p.shape != (c,):
            raise ShapeError(f"batch_norm_inference: {name} has shape {p.shape}, input has {c} channels")
    if np.any(var.data < 0):
        raise ValueError("batch_norm_inference: variance must be non-negative")
    xd, md, gd = x.data, mean.data, gamma.data
    inv = 1.0 / np.sqrt(var.data + eps)
    xhat = (xd - md) * inv
    out = Tensor._wrap(xhat * gd + beta.data)
    axes = tuple(range(xd.ndim - 1))

    def vjp(g):
        gx = g * gd * inv
        g_mean = -gx.sum(axis=axes)
        g_var = (g * gd * (xd - md)).sum(axis=axes) * (-0.5) * inv ** 3
        return gx, g_mean, g_var, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out, (x, mean, var, gamma, beta), vjp)


# -- pooling ----------------------------------------------------------------

def pool2d(x: Tensor, kind: str, k: int, stride: int, padding: int = 0) -> Tensor:
    if kind not in ("max", "avg"):
        raise ValueError(f"pool2d: kind must be 'max' or 'avg', got {kind!r}")
    if stride < 1:
        raise ValueError("pool2d: stride must be positive")
    if k < 1 or padding < 0:
        raise ValueError("pool2d: k must be ≥ 1 and padding ≥ 0")
    x4 = _spatial(x, "pool2d")
    n, w, h, c = x4.shape
    if w + 2 * padding < k or h + 2 * padding < k:
        raise ShapeError(f"pool2d: {k}×{k} window does not fit input {x.shape} with padding {padding}")
    fill = -np.inf if kind == "max" else 0.0
    xp = np.pad(x4, ((0, 0), (padding, padding), (padding, padding), (0, 0)), constant_values=fill)
    win = _windows(xp, k, stride)
    flat = win.reshape(win.shape[:4] + (k * k,))
    if kind == "max":
        idx = flat.argmax(axis=-1)
        out4 = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    else:
        out4 = flat.sum(axis=-1) / (k * k)
    out = Tensor._wrap(_unbatch(out4, x))

    def vjp(g):
        g4 = g[None] if x.data.ndim == 3 else g
        if kind == "max":
            gflat = np.zeros(flat.shape)
            np.put_along_axis(gflat, idx[..., None], g4[..., None], axis=-1)
        else:
            gflat = np.broadcast_to(g4[..., None] / (k * k), flat.shape)
        gwin = gflat.reshape(win.shape)
        gxp = _scatter_windows(gwin, xp.shape, k, stride)
        return (_unbatch(gxp[:, padding:padding + w, padding:padding + h, :], x),)

    return record(out, (x,), vjp)


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce over space: (…, W, H, C) -> (…, 1, 1, C)."""
    x4 = _spatial(x, "global_pool")
    n, w, h, c = x4.shape
    flat = x4.reshape(n, w * h, c)
    if kind == "max":
        idx = flat.argmax(axis=1)
        red = np.take_along_axis(flat, idx[:, None, :], axis=1)
    elif kind == "avg":
        red = flat.mean(axis=1, keepdims=True)
    else:
        raise ValueError(f"global_pool: kind must be 'max' or 'avg', got {kind!r}")
    out = Tensor._wrap(_unbatch(red.reshape(n, 1, 1, c), x))

    def vjp(g):
        g2 = g.reshape(n, 1, c)
        if kind == "max":
            gflat = np.zeros(flat.shape)
            np.put_along_axis(gflat, idx[:, None, :], g2, axis=1)
        else:
            gflat = np.broadcast_to(g2 / (w * h), flat.shape)
        return (_unbatch(gflat.reshape(x4.shape), x),)

    return record(out, (x,), vjp)


def channel_pool(x: Tensor, kind: str) -> Tensor:
    """Reduce over channels: (…, W, H, C) -> (…, W, H, 1)."""
    xd = x.data
    c = xd.shape[-1]
    if kind == "max":
        idx = xd.argmax(axis=-1)[..., None]
        red = np.take_along_axis(xd, idx, axis=-1)
    elif kind == "avg":
        red = xd.mean(axis=-1, keepdims=True)
    else:
        raise ValueError(f"channel_pool: kind must be 'max' or 'avg', got {kind!r}")
    out = Tensor._wrap(red)

    def vjp(g):
        if kind == "max":
            gx = np.zeros(xd.shape)
            np.put_along_axis(gx, idx, g, axis=-1)
            return (gx,)
        return (np.broadcast_to(g / c, xd.shape).copy(),)

    return record(out, (x,), vjp)


# -- layout -----------------------------------------------------------------

def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 1:
        raise ValueError("upsample_nearest: factor must be ≥ 1")
    x4 = _spatial(x, "upsample_nearest")
    n, w, h, c = x4.shape
    out4 = np.repeat(np.repeat(x4, factor, axis=1), factor, axis=2)
    out = Tensor._wrap(_unbatch(out4, x))

    def vjp(g):
        g4 = g[None] if x.data.ndim == 3 else g
        gx = g4.reshape(n, w, factor, h, factor, c).sum(axis=(2, 4))
        return (_unbatch(gx, x),)

    return record(out, (x,), vjp)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis; ``a`` occupies the leading channels."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat_channels: spatial extents differ, {a.shape} vs {b.shape}")
    c1 = a.shape[-1]
    out = Tensor._wrap(np.concatenate([a.data, b.data], axis=-1))
    return record(out, (a, b), lambda g: (g[..., :c1], g[..., c1:]))


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    c = x.shape[-1]
    if not 0 <= start <= stop <= c:
        raise ShapeError(f"slice_channels: [{start}, {stop}) out of range for {c} channels")
    out = Tensor._wrap(x.data[..., start:stop])

    def vjp(g):
        gx = np.zeros(x.shape)
        gx[..., start:stop] = g
        return (gx,)

    return record(out, (x,), vjp)


def broadcast_mul(attn: Tensor, feature: Tensor) -> Tensor:
    """Multiply by a channel map (…,1,1,C) or spatial map (…,W,H,1), replicated as needed."""
    fs, ms = feature.shape, attn.shape
    channel_map = len(ms) == len(fs) and ms[-3:-1] == (1, 1) and ms[-1] == fs[-1] and ms[:-3] == fs[:-3]
    spatial_map = len(ms) == len(fs) and ms[:-1] == fs[:-1] and ms[-1] == 1
    if not (channel_map or spatial_map) or len(fs) < 3:
        raise ShapeError(f"broadcast_mul: map of shape {ms} is neither a channel nor a spatial map for feature {fs}")
    md, fd = attn.data, feature.data
    out = Tensor._wrap(md * fd)
    # when both patterns apply (1×1×1 map on 1×1×C) the reduction below covers both
    axes = tuple(i for i in range(len(fs)) if ms[i] == 1 and fs[i] != 1)

    def vjp(g):
        gm = (g * fd).sum(axis=axes, keepdims=True) if axes else g * fd
        return gm.reshape(ms), g * md

    return record(out, (attn, feature), vjp)
