"""Per-stage and FC-head forward/backward, shared by the column and row dataflows."""

from __future__ import annotations

import numpy as np

from .kernels import (
    PadSpec,
    conv2d_bwd,
    conv2d_fwd,
    fc_bwd,
    fc_fwd,
    pool_bwd,
    pool_fwd,
    relu_bwd,
    relu_fwd,
)
from .netspec import NetworkSpec, ParamSet, Stage


def stage_pad(stage: Stage, pad_top: int | None = None, pad_bottom: int | None = None) -> PadSpec:
    if stage.kind == "pool":
        return PadSpec()
    top = stage.p if pad_top is None else pad_top
    bottom = stage.p if pad_bottom is None else pad_bottom
    return PadSpec(top, bottom, stage.p, stage.p)


def stage_forward(stage: Stage, params: ParamSet, x: np.ndarray, pad: PadSpec) -> np.ndarray:
    """``x`` is the stored (pre-activation) input block."""
    a = relu_fwd(x) if stage.relu_in else x
    if stage.kind == "conv":
        return conv2d_fwd(a, params[f"stage{stage.index}.w"], params[f"stage{stage.index}.b"], stage.s, pad)
    out, _ = pool_fwd(a, stage.pool_kind, stage.k, stage.s)
    return out


def stage_backward(stage: Stage, params: ParamSet, x: np.ndarray, pad: PadSpec,
                   delta: np.ndarray, need_input_grad: bool = True):
    """Returns ``(delta wrt stored x or None, grad_w or None, grad_b or None)``.

    Max-pool argmax indices are recomputed from ``x`` rather than cached.
    """
    a = relu_fwd(x) if stage.relu_in else x
    if stage.kind == "conv":
        da, gw, gb = conv2d_bwd(a, params[f"stage{stage.index}.w"], stage.s, pad, delta, need_input_grad)
    else:
        gw = gb = None
        da = None
        if need_input_grad:
            _, arg = pool_fwd(a, stage.pool_kind, stage.k, stage.s)
            da = pool_bwd(stage.pool_kind, delta, a.shape, stage.k, stage.s, arg)
    if da is not None and stage.relu_in:
        da = relu_bwd(x, da)
    return da, gw, gb


def head_forward(spec: NetworkSpec, params: ParamSet, z_last: np.ndarray):
    """Returns ``(logits, head_inputs)``; inputs are kept for the backward pass."""
    h = z_last.reshape(z_last.shape[0], -1)
    inputs = []
    for hl in spec.head:
        inputs.append(h)
        a = relu_fwd(h) if hl.relu_in else h
        h = fc_fwd(a, params[f"fc{hl.index}.w"], params[f"fc{hl.index}.b"])
    return h, inputs


def head_backward(spec: NetworkSpec, params: ParamSet, inputs, delta_logits, grads: ParamSet,
                  z_shape) -> np.ndarray:
    """Accumulates FC gradients into ``grads``; returns delta wrt stored z^L."""
    d = delta_logits
    for hl, h in zip(reversed(spec.head), reversed(inputs)):
        a = relu_fwd(h) if hl.relu_in else h
        d, gw, gb = fc_bwd(a, params[f"fc{hl.index}.w"], d)
        grads[f"fc{hl.index}.w"] += gw
        grads[f"fc{hl.index}.b"] += gb
        if hl.relu_in:
            d = relu_bwd(h, d)
    return d.reshape(z_shape)
