"""Backward-vs-finite-difference checks for the attention and fusion blocks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import (
    CBAMParams,
    ChannelAttentionParams,
    SpatialAttentionParams,
    channel_attention,
    cbam_forward,
    fused_concat_attention,
    init_cbam,
    init_channel_attention,
    init_spatial_attention,
    spatial_attention,
)
from .net import Checkpoint, NetworkConfig, SegMap, c3_forward, full_forward, neck_forward, yolo_backbone_stub
from .net.blocks import init_c3
from .numeric import Tape, Tensor, add, backward, mul, relative_error, sum as tsum

STEP = 1e-5


@dataclass(frozen=True)
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error <= self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} rel_err={self.error:.3e} tol={self.tol:g}"


def _weighted(out, weights) -> Tensor:
    if isinstance(out, Tensor):
        return tsum(mul(out, weights))
    total = None
    for key in sorted(out):
        term = tsum(mul(out[key], weights[key]))
        total = term if total is None else add(total, term)
    return total


def _random_weights(out, rng: np.random.Generator):
    if isinstance(out, Tensor):
        return Tensor(rng.uniform(0.5, 1.5, size=out.shape))
    return {key: Tensor(rng.uniform(0.5, 1.5, size=out[key].shape)) for key in sorted(out)}


def check_gradients(
    fn: Callable[[Sequence[Tensor]], "Tensor | dict"],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    sample: int | None = None,
    step: float = STEP,
    corrupt: bool = False,
) -> float:
    """Relative error between taped and central-difference gradients.

    ``fn`` maps the input list to an output tensor (or a dict of them); the
    scalar loss is the output weighted by fixed random coefficients. With
    ``sample`` set, only that many seeded coordinates per input are
    differenced.
    """
    weights = _random_weights(fn(list(inputs)), rng)

    with Tape() as tape:
        tape.watch(*inputs)
        loss = _weighted(fn(list(inputs)), weights)
    grads = backward(loss, list(inputs))

    analytic, numeric = [], []
    for k, x in enumerate(inputs):
        flat = x.data.reshape(-1)
        idx = np.arange(flat.size)
        if sample is not None and sample < flat.size:
            idx = np.sort(rng.choice(flat.size, size=sample, replace=False))
        for i in idx:
            vals = []
            for sign in (1.0, -1.0):
                moved = flat.copy()
                moved[i] += sign * step
                args = list(inputs)
                args[k] = Tensor._wrap(moved.reshape(x.shape))
                vals.append(_weighted(fn(args), weights).item())
            numeric.append((vals[0] - vals[1]) / (2 * step))
            analytic.append(grads[k].data.reshape(-1)[i])
    analytic = np.array(analytic)
    if corrupt:
        analytic = analytic * 1.01 + 1e-3
    return relative_error(analytic, np.array(numeric))


def _cbam_tensors(p: CBAMParams) -> list[Tensor]:
    return list(p.tensors().values())


def _cbam_from(values: Sequence[Tensor], like: CBAMParams) -> CBAMParams:
    names = list(like.tensors().keys())
    return CBAMParams.from_tensors(dict(zip(names, values)))


def run_block_checks(seed: int = 0, tol: float = 1e-4, corrupt: bool = False) -> list[GradResult]:
    """Attention, CBAM, fusion-attention and C3+CBAM on 4×4×4 inputs, w.r.t. inputs and all parameters."""
    rng = np.random.default_rng(seed)
    results = []
    F = Tensor(rng.normal(size=(4, 4, 4)))

    ca = init_channel_attention(4, rng, reduction=2)
    ca_names = list(ca.tensors())

    def f_channel(v):
        return channel_attention(v[0], ChannelAttentionParams.from_tensors(dict(zip(ca_names, v[1:]))))

    results.append(GradResult("channel_attention", check_gradients(
        f_channel, [F, *ca.tensors().values()], rng, corrupt=corrupt), tol))

    sa = init_spatial_attention(rng)

    def f_spatial(v):
        return spatial_attention(v[0], SpatialAttentionParams(v[1], v[2]))

    results.append(GradResult("spatial_attention", check_gradients(
        f_spatial, [F, sa.kernel, sa.bias], rng, corrupt=corrupt), tol))

    cb = init_cbam(4, rng, reduction=2)
    results.append(GradResult("cbam_forward", check_gradients(
        lambda v: cbam_forward(v[0], _cbam_from(v[1:], cb)), [F, *_cbam_tensors(cb)], rng, corrupt=corrupt), tol))

    seg = Tensor(rng.uniform(0.1, 0.9, size=(4, 4, 1)))
    fa = init_channel_attention(5, rng, reduction=2)
    fa_names = list(fa.tensors())

    def f_fused(v):
        return fused_concat_attention(v[0], v[1], ChannelAttentionParams.from_tensors(dict(zip(fa_names, v[2:]))))

    results.append(GradResult("fused_concat_attention", check_gradients(
        f_fused, [F, seg, *fa.tensors().values()], rng, corrupt=corrupt), tol))

    c3p: dict[str, Tensor] = {}
    init_c3(c3p, "c3", 4, 4, rng, with_cbam=True, reduction=2)
    c3_names = list(c3p)

    def f_c3(v):
        return c3_forward(v[0], dict(zip(c3_names, v[1:])), "c3", with_cbam=True, shortcut=True)

    results.append(GradResult("c3_forward(with_cbam)", check_gradients(
        f_c3, [F, *c3p.values()], rng, corrupt=corrupt), tol))
    return results


def run_network_checks(size: int = 32, seed: int = 0, tol: float = 1e-3, sample: int = 256,
                       corrupt: bool = False) -> list[GradResult]:
    """Neck w.r.t. the segmentation map, and the whole network w.r.t. its input."""
    rng = np.random.default_rng(seed)
    ckpt = Checkpoint.initialise(NetworkConfig(input_size=size), seed=seed)
    x = Tensor(rng.uniform(0.0, 1.0, size=(size, size, 3)))
    pyr = yolo_backbone_stub(x, ckpt.params, ckpt.config)
    seg = Tensor(rng.uniform(0.1, 0.9, size=(size, size, 1)))

    def f_neck(v):
        return neck_forward(pyr, SegMap(v[0]), ckpt.params, ckpt.config)

    def f_full(v):
        return full_forward(v[0], ckpt)

    return [
        GradResult("neck_forward(seg)", check_gradients(f_neck, [seg], rng, sample=sample, corrupt=corrupt), tol),
        GradResult("full_forward(x)", check_gradients(f_full, [x], rng, sample=sample, corrupt=corrupt), tol),
    ]


def run_all(size: int = 32, seed: int = 0, tol: float = 1e-3, block_tol: float | None = None,
            corrupt: bool = False) -> list[GradResult]:
    block_tol = tol if block_tol is None else block_tol
    return run_block_checks(seed, block_tol, corrupt) + run_network_checks(size, seed, tol, corrupt=corrupt)
