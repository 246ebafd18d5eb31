"""Classic layer-by-layer trainer that retains every feature map.

This is the ground truth the row-centric executors are compared against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import CorruptStateError, InvalidShapeError
from .meter import Category, MemoryMeter
from .netspec import NetworkSpec, ParamSet


@dataclass
class ForwardTape:
    zs: list  # z^0 .. z^L, pre-activation
    argmax: dict  # stage index -> argmax indices of max-pool stages
    head_inputs: list
    logits: np.ndarray
    delta_logits: np.ndarray
    meter: MemoryMeter | None = None
    handles: dict = field(default_factory=dict)  # layer index -> meter handle


def forward_full(spec: NetworkSpec, params: ParamSet, batch, labels, meter: MemoryMeter | None = None):
    """Returns ``(tape, loss)``."""
    x = K.as_tensor(batch)
    if x.shape[1:] != spec.input_dims:
        raise InvalidShapeError(f"batch dims {x.shape[1:]} != network input {spec.input_dims}")
    zs, argmax, handles = [x], {}, {}
    z = x
    for st in spec.stages:
        a = K.relu_fwd(z) if st.relu_in else z
        if st.kind == "conv":
            z = K.conv2d_fwd(a, params[f"stage{st.index}.w"], params[f"stage{st.index}.b"],
                             st.s, K.PadSpec.uniform(st.p))
        else:
            z, arg = K.pool_fwd(a, st.pool_kind, st.k, st.s)
            if arg is not None:
                argmax[st.index] = arg
        if meter is not None:
            handles[st.index] = meter.alloc_array(z, Category.FEATURE_MAP)
        zs.append(z)
    h = z.reshape(z.shape[0], -1)
    head_inputs = []
    for hl in spec.head:
        head_inputs.append(h)
        a = K.relu_fwd(h) if hl.relu_in else h
        h = K.fc_fwd(a, params[f"fc{hl.index}.w"], params[f"fc{hl.index}.b"])
    loss, delta = K.softmax_xent(h, labels)
    return ForwardTape(zs, argmax, head_inputs, h, delta, meter, handles), loss


def backward_full(spec: NetworkSpec, params: ParamSet, tape: ForwardTape, labels=None,
                  delta_scale: float = 1.0) -> ParamSet:
    """Exact gradients of the batch-mean loss. ``labels`` re-derives the loss delta if given."""
    if len(tape.zs) != spec.L + 1 or any(z.shape[1:] != s for z, s in zip(tape.zs, spec.shapes)):
        raise CorruptStateError("tape does not match the network's propagated shapes")
    delta = tape.delta_logits
    if labels is not None:
        _, delta = K.softmax_xent(tape.logits, labels)
    d = delta * delta_scale
    grads = params.zeros_like()
    for hl, h in zip(reversed(spec.head), reversed(tape.head_inputs)):
        a = K.relu_fwd(h) if hl.relu_in else h
        d, gw, gb = K.fc_bwd(a, params[f"fc{hl.index}.w"], d)
        grads[f"fc{hl.index}.w"] += gw
        grads[f"fc{hl.index}.b"] += gb
        if hl.relu_in:
            d = K.relu_bwd(h, d)
    d = d.reshape(tape.zs[-1].shape)
    for st in reversed(spec.stages):
        z_in = tape.zs[st.index - 1]
        a = K.relu_fwd(z_in) if st.relu_in else z_in
        need_dx = st.index > 1
        if st.kind == "conv":
            d, gw, gb = K.conv2d_bwd(a, params[f"stage{st.index}.w"], st.s, K.PadSpec.uniform(st.p), d, need_dx)
            grads[f"stage{st.index}.w"] += gw
            grads[f"stage{st.index}.b"] += gb
        else:
            d = K.pool_bwd(st.pool_kind, d, a.shape, st.k, st.s, tape.argmax.get(st.index)) if need_dx else None
        if d is not None and st.relu_in:
            d = K.relu_bwd(z_in, d)
        if tape.meter is not None and st.index in tape.handles:
            tape.meter.track_free(tape.handles.pop(st.index))
    return grads


def sgd_update(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    return ParamSet((k, v - lr * grads[k]) for k, v in params.items())


def train_step(spec: NetworkSpec, params: ParamSet, batch, labels, lr: float,
               meter: MemoryMeter | None = None):
    """One plain-SGD step. Returns ``(new_params, loss)``."""
    handles = []
    if meter is not None:
        handles.append(meter.track_alloc(params.nbytes(meter.element_size), Category.PARAMS))
        handles.append(meter.track_alloc(params.nbytes(meter.element_size), Category.GRADS))
        handles.append(meter.alloc_array(np.asarray(batch), Category.OTHER))
    tape, loss = forward_full(spec, params, batch, labels, meter)
    grads = backward_full(spec, params, tape)
    if meter is not None:
        for h in handles:
            meter.track_free(h)
    return sgd_update(params, grads, lr), loss
