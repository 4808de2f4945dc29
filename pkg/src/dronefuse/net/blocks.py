"""Convolutional building blocks: CBS, bottleneck, C3 (optionally with CBAM), SPPF.

Parameters live in a flat ``{name: Tensor}`` mapping; every block reads the
entries under its own dotted prefix.
"""
from __future__ import annotations

from typing import Mapping

import numpy as np

from ..attention import CBAMParams, cbam_forward, init_cbam
from ..numeric import Tensor, add, batch_norm_inference, concat_channels, conv2d, pool2d, silu

BN_EPS = 1e-5

Params = Mapping[str, Tensor]


def cbs_forward(x: Tensor, params: Params, prefix: str, stride: int = 1) -> Tensor:
    """conv -> batch norm (inference) -> SiLU, with same-padding."""
    w = params[f"{prefix}.weight"]
    y = conv2d(x, w, params[f"{prefix}.bias"], stride=stride, padding=w.shape[0] // 2)
    y = batch_norm_inference(
        y,
        params[f"{prefix}.bn_mean"],
        params[f"{prefix}.bn_var"],
        params[f"{prefix}.bn_gamma"],
        params[f"{prefix}.bn_beta"],
        eps=BN_EPS,
    )
    return silu(y)


def bottleneck_forward(x: Tensor, params: Params, prefix: str, with_cbam: bool, shortcut: bool) -> Tensor:
    y = cbs_forward(cbs_forward(x, params, f"{prefix}.cv1"), params, f"{prefix}.cv2")
    if with_cbam:
        y = cbam_forward(y, CBAMParams.from_tensors(params, f"{prefix}.cbam."))
    return add(x, y) if shortcut else y


def c3_forward(x: Tensor, params: Params, prefix: str, with_cbam: bool = False,
               shortcut: bool = True, depth: int = 1) -> Tensor:
    """CSP bottleneck with three convolutions.

    Two 1x1 branches split the input; the first runs through ``depth``
    bottlenecks (CBAM applied to the bottleneck output before the residual
    add when ``with_cbam``), then both are concatenated and fused by cv3.
    """
    a = cbs_forward(x, params, f"{prefix}.cv1")
    for i in range(depth):
        a = bottleneck_forward(a, params, f"{prefix}.m{i}", with_cbam, shortcut)
    b = cbs_forward(x, params, f"{prefix}.cv2")
    return cbs_forward(concat_channels(a, b), params, f"{prefix}.cv3")


def sppf_forward(x: Tensor, params: Params, prefix: str, pool_size: int = 5) -> Tensor:
    y0 = cbs_forward(x, params, f"{prefix}.cv1")
    pad = pool_size // 2
    y1 = pool2d(y0, "max", pool_size, 1, pad)
    y2 = pool2d(y1, "max", pool_size, 1, pad)
    y3 = pool2d(y2, "max", pool_size, 1, pad)
    cat = concat_channels(concat_channels(concat_channels(y0, y1), y2), y3)
    return cbs_forward(cat, params, f"{prefix}.cv2")


# -- initialisation ---------------------------------------------------------

def init_cbs(params: dict, prefix: str, cin: int, cout: int, k: int,
             rng: np.random.Generator | None) -> None:
    """Fill CBS entries; ``rng=None`` gives zero conv weights and identity norm."""
    if rng is None:
        params[f"{prefix}.weight"] = Tensor(np.zeros((k, k, cin, cout)))
        params[f"{prefix}.bias"] = Tensor(np.zeros(cout))
        params[f"{prefix}.bn_mean"] = Tensor(np.zeros(cout))
        params[f"{prefix}.bn_var"] = Tensor(np.ones(cout))
        params[f"{prefix}.bn_gamma"] = Tensor(np.ones(cout))
        params[f"{prefix}.bn_beta"] = Tensor(np.zeros(cout))
        return
    bound = np.sqrt(6.0 / (k * k * cin))
    params[f"{prefix}.weight"] = Tensor(rng.uniform(-bound, bound, size=(k, k, cin, cout)))
    params[f"{prefix}.bias"] = Tensor(rng.uniform(-0.1, 0.1, size=cout))
    params[f"{prefix}.bn_mean"] = Tensor(rng.uniform(-0.1, 0.1, size=cout))
    params[f"{prefix}.bn_var"] = Tensor(rng.uniform(0.5, 1.5, size=cout))
    params[f"{prefix}.bn_gamma"] = Tensor(rng.uniform(0.5, 1.5, size=cout))
    params[f"{prefix}.bn_beta"] = Tensor(rng.uniform(-0.1, 0.1, size=cout))


def _init_cbam_entries(params: dict, prefix: str, channels: int, reduction: int,
                       rng: np.random.Generator | None) -> None:
    if rng is None:
        cbam = init_cbam(channels, np.random.default_rng(0), reduction)
        for name, t in cbam.tensors(prefix).items():
            params[name] = Tensor(np.zeros(t.shape))
    else:
        params.update(init_cbam(channels, rng, reduction).tensors(prefix))


def init_c3(params: dict, prefix: str, cin: int, cout: int, rng: np.random.Generator | None,
            with_cbam: bool = False, reduction: int = 4, depth: int = 1) -> None:
    hidden = max(1, cout // 2)
    init_cbs(params, f"{prefix}.cv1", cin, hidden, 1, rng)
    init_cbs(params, f"{prefix}.cv2", cin, hidden, 1, rng)
    init_cbs(params, f"{prefix}.cv3", 2 * hidden, cout, 1, rng)
    for i in range(depth):
        init_cbs(params, f"{prefix}.m{i}.cv1", hidden, hidden, 1, rng)
        init_cbs(params, f"{prefix}.m{i}.cv2", hidden, hidden, 3, rng)
        if with_cbam:
            _init_cbam_entries(params, f"{prefix}.m{i}.cbam.", hidden, reduction, rng)


def init_sppf(params: dict, prefix: str, cin: int, cout: int, rng: np.random.Generator | None) -> None:
    hidden = max(1, cin // 2)
    init_cbs(params, f"{prefix}.cv1", cin, hidden, 1, rng)
    init_cbs(params, f"{prefix}.cv2", 4 * hidden, cout, 1, rng)
