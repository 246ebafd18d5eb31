"""Dense float64 tensor operators: convolution, pooling, ReLU, FC and loss.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 laid out as
``[batch, channels, height, width]`` (C order). Every operator is a pure
function of its arguments.

Convolution is computed directly (no im2col): for each output element the
MUL-SUM runs channel-major, then kernel row, then kernel column. Because the
order is fixed per element, a row block of the output computed from a row
block of the input is bitwise identical to the same rows of a full-height
computation.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptStateError,
    InvalidLabelError,
    InvalidShapeError,
    KernelExceedsInputError,
)

DTYPE = np.float64


@dataclass(frozen=True)
class PadSpec:
    """Implicit zero border. Interior row-partition boundaries carry 0."""

    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0

    def __post_init__(self):
        if min(self.top, self.bottom, self.left, self.right) < 0:
            raise InvalidShapeError(f"negative padding {self}")

    @classmethod
    def uniform(cls, p: int) -> "PadSpec":
        return cls(p, p, p, p)

    @classmethod
    def semi_closed(cls, p: int, at_top: bool, at_bottom: bool) -> "PadSpec":
        """Pad the horizontal edges only where they are the original map's edges."""
        return cls(p if at_top else 0, p if at_bottom else 0, p, p)


def out_dim(n: int, k: int, s: int, pad_lo: int = 0, pad_hi: int = 0) -> int:
    """Standard shape law: floor((n + pads - k) / s) + 1."""
    padded = n + pad_lo + pad_hi
    if k > padded:
        raise KernelExceedsInputError(f"kernel {k} exceeds padded extent {padded}")
    return (padded - k) // s + 1


def as_tensor(x) -> np.ndarray:
    t = np.ascontiguousarray(x, dtype=DTYPE)
    if t.ndim != 4 or min(t.shape) < 1:
        raise InvalidShapeError(f"expected a 4-D tensor with all dims >= 1, got {t.shape}")
    return t


# ---------------------------------------------------------------------------
# FLOP instrumentation

class FlopCounter:
    """Counts floating-point operations (2 per multiply-add) of conv kernels."""

    def __init__(self):
        self.fwd = 0
        self.bwd_data = 0
        self.bwd_weight = 0

    @property
    def total(self) -> int:
        return self.fwd + self.bwd_data + self.bwd_weight


_local = threading.local()


@contextlib.contextmanager
def count_flops():
    prev = getattr(_local, "counter", None)
    counter = FlopCounter()
    _local.counter = counter
    try:
        yield counter
    finally:
        _local.counter = prev


def _active_counter():
    return getattr(_local, "counter", None)


# ---------------------------------------------------------------------------
# Convolution

def _pad(x: np.ndarray, pad: PadSpec) -> np.ndarray:
    if pad.top == pad.bottom == pad.left == pad.right == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad.top, pad.bottom), (pad.left, pad.right)))


def _check_conv(x, weights, stride, pad):
    x = as_tensor(x)
    w = np.asarray(weights, dtype=DTYPE)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise InvalidShapeError(f"kernel must be [C_out][C_in][k][k], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise InvalidShapeError(f"input has {x.shape[1]} channels, kernel expects {w.shape[1]}")
    if stride < 1:
        raise InvalidShapeError("stride must be >= 1")
    k = w.shape[2]
    ho = out_dim(x.shape[2], k, stride, pad.top, pad.bottom)
    wo = out_dim(x.shape[3], k, stride, pad.left, pad.right)
    return x, w, k, ho, wo


def conv2d_fwd(x, weights, bias=None, stride: int = 1, pad: PadSpec = PadSpec()) -> np.ndarray:
    x, w, k, ho, wo = _check_conv(x, weights, stride, pad)
    b_, c_in = x.shape[:2]
    c_out = w.shape[0]
    xp = _pad(x, pad)
    out = np.zeros((b_, c_out, ho, wo), dtype=DTYPE)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    for c in range(c_in):
        for i in range(k):
            for j in range(k):
                patch = xp[:, c, i:i + h_span:stride, j:j + w_span:stride]
                out += w[None, :, c, i, j, None, None] * patch[:, None]
    if bias is not None:
        out += np.asarray(bias, dtype=DTYPE)[None, :, None, None]
    counter = _active_counter()
    if counter is not None:
        counter.fwd += 2 * b_ * c_out * ho * wo * c_in * k * k
    return out


def conv2d_bwd(x, weights, stride: int, pad: PadSpec, delta_out, need_input_grad: bool = True):
    """Adjoint of :func:`conv2d_fwd`.

    Returns ``(delta_in, grad_weights, grad_bias)``; ``delta_in`` is None when
    ``need_input_grad`` is false.
    """
    x, w, k, ho, wo = _check_conv(x, weights, stride, pad)
    d = np.asarray(delta_out, dtype=DTYPE)
    b_, c_in, h, wd = x.shape
    c_out = w.shape[0]
    if d.shape != (b_, c_out, ho, wo):
        raise InvalidShapeError(f"delta_out {d.shape} != forward output {(b_, c_out, ho, wo)}")
    xp = _pad(x, pad)
    h_span = stride * (ho - 1) + 1
    w_span = stride * (wo - 1) + 1
    gw = np.zeros_like(w)
    dxp = np.zeros_like(xp) if need_input_grad else None
    for c in range(c_in):
        for i in range(k):
            for j in range(k):
                patch = xp[:, c, i:i + h_span:stride, j:j + w_span:stride]
                gw[:, c, i, j] = np.tensordot(d, patch, axes=([0, 2, 3], [0, 1, 2]))
                if dxp is not None:
                    dxp[:, c, i:i + h_span:stride, j:j + w_span:stride] += np.tensordot(
                        w[:, c, i, j], d, axes=([0], [1]))
    gb = d.sum(axis=(0, 2, 3))
    macs = b_ * c_out * ho * wo * c_in * k * k
    counter = _active_counter()
    if counter is not None:
        counter.bwd_weight += 2 * macs
        if need_input_grad:
            counter.bwd_data += 2 * macs
    dx = None
    if dxp is not None:
        dx = np.ascontiguousarray(dxp[:, :, pad.top:pad.top + h, pad.left:pad.left + wd])
    return dx, gw, gb


# ---------------------------------------------------------------------------
# Pooling

def pool_fwd(x, kind: str, k: int, s: int):
    """Max or average pooling without padding.

    Returns ``(output, argmax)``; ``argmax`` holds, per output cell, the flat
    index ``h * W + w`` of the chosen element inside its (b, c) plane, or None
    for average pooling. Ties go to the lowest flat index.
    """
    x = as_tensor(x)
    if kind not in ("max", "avg"):
        raise InvalidShapeError(f"unknown pool kind {kind!r}")
    _, _, h, wd = x.shape
    ho = out_dim(h, k, s)
    wo = out_dim(wd, k, s)
    h_span = s * (ho - 1) + 1
    w_span = s * (wo - 1) + 1
    if kind == "avg":
        out = np.zeros(x.shape[:2] + (ho, wo), dtype=DTYPE)
        for i in range(k):
            for j in range(k):
                out += x[:, :, i:i + h_span:s, j:j + w_span:s]
        return out / (k * k), None
    out = x[:, :, 0:h_span:s, 0:w_span:s].copy()
    rows = np.arange(ho)[:, None] * s
    cols = np.arange(wo)[None, :] * s
    arg = np.broadcast_to(rows * wd + cols, out.shape).copy()
    for i in range(k):
        for j in range(k):
            if i == 0 and j == 0:
                continue
            cand = x[:, :, i:i + h_span:s, j:j + w_span:s]
            better = cand > out
            out = np.where(better, cand, out)
            arg = np.where(better, (rows + i) * wd + cols + j, arg)
    return out, arg


def pool_bwd(kind: str, delta_out, input_shape, k: int, s: int, argmax=None) -> np.ndarray:
    d = np.asarray(delta_out, dtype=DTYPE)
    b_, c, h, wd = input_shape
    ho = out_dim(h, k, s)
    wo = out_dim(wd, k, s)
    if d.shape != (b_, c, ho, wo):
        raise InvalidShapeError(f"delta_out {d.shape} != pool output {(b_, c, ho, wo)}")
    dx = np.zeros((b_, c, h, wd), dtype=DTYPE)
    if kind == "max":
        if argmax is None or argmax.shape != d.shape:
            raise CorruptStateError("max-pool backward needs argmax indices matching delta_out")
        if argmax.size and (argmax.min() < 0 or argmax.max() >= h * wd):
            raise CorruptStateError("argmax index out of range")
        flat = dx.reshape(b_, c, h * wd)
        bi = np.arange(b_)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(flat, (bi, ci, argmax), d)
        return dx
    if kind != "avg":
        raise InvalidShapeError(f"unknown pool kind {kind!r}")
    h_span = s * (ho - 1) + 1
    w_span = s * (wo - 1) + 1
    share = d / (k * k)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + h_span:s, j:j + w_span:s] += share
    return dx


# ---------------------------------------------------------------------------
# Elementwise, dense and loss

def relu_fwd(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=DTYPE), 0.0)


def relu_bwd(x, delta_out) -> np.ndarray:
    # derivative at exactly 0 is taken as 0
    return np.where(np.asarray(x) > 0.0, delta_out, 0.0)


def fc_fwd(x, weights, bias=None) -> np.ndarray:
    x = np.asarray(x, dtype=DTYPE)
    w = np.asarray(weights, dtype=DTYPE)
    if x.ndim != 2 or x.shape[1] != w.shape[1]:
        raise InvalidShapeError(f"fc input {x.shape} does not match weights {w.shape}")
    out = x @ w.T
    if bias is not None:
        out = out + bias
    return out


def fc_bwd(x, weights, delta_out):
    """Returns ``(delta_in, grad_weights, grad_bias)``."""
    x = np.asarray(x, dtype=DTYPE)
    d = np.asarray(delta_out, dtype=DTYPE)
    w = np.asarray(weights, dtype=DTYPE)
    if d.shape != (x.shape[0], w.shape[0]):
        raise InvalidShapeError(f"delta_out {d.shape} does not match fc output")
    return d @ w, d.T @ x, d.sum(axis=0)


def softmax_xent(logits, labels):
    """Mean softmax cross-entropy. Returns ``(loss, delta_logits)``."""
    z = np.asarray(logits, dtype=DTYPE)
    y = np.asarray(labels, dtype=np.int64)
    n, classes = z.shape
    if y.shape != (n,):
        raise InvalidShapeError(f"labels {y.shape} do not match batch {n}")
    if y.size and (y.min() < 0 or y.max() >= classes):
        raise InvalidLabelError(f"label outside [0, {classes})")
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - lse[:, None]
    loss = float(-logp[np.arange(n), y].mean())
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    return loss, delta / n


# ---------------------------------------------------------------------------
# Height slicing

def slice_height(t, h0: int, h1: int) -> np.ndarray:
    t = as_tensor(t)
    if not 0 <= h0 < h1 <= t.shape[2]:
        raise InvalidShapeError(f"height range [{h0}, {h1}) outside [0, {t.shape[2]})")
    return t[:, :, h0:h1].copy()


def concat_height(parts) -> np.ndarray:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise InvalidShapeError("nothing to concatenate")
    b_, c, _, w = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[1], p.shape[3]) != (b_, c, w):
            raise InvalidShapeError(f"cannot concatenate {p.shape} with {parts[0].shape}")
    return np.concatenate(parts, axis=2)
