"""Row-centric training executors: 2PS, OverL and their checkpointing hybrids.

A plan is a list of checkpoint segments (a single segment for the non-hybrid
modes). FP runs each segment row by row and keeps only the segment's output:
the full last-layer map for the final segment, a full-width checkpoint for
the others. BP walks the segments last to first; inside a segment every row
recomputes its own feature blocks from the segment input, takes its owned
slice of the incoming delta, and adds its weight-gradient contribution.

2PS rows run top to bottom in FP (share caches flow down) and bottom to top
in BP (delta carries flow up). OverL rows never talk to each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import column
from .errors import CorruptStateError, InvalidArgumentError
from .kernels import as_tensor, softmax_xent
from .meter import Category, MemoryMeter
from .netspec import NetworkSpec, ParamSet
from .ops import head_backward, head_forward, stage_backward, stage_forward, stage_pad
from .planner import RowPlan, SegmentPlan


@dataclass
class RowState:
    """What survives from FP to BP."""

    x: np.ndarray
    outputs: list  # per segment: [array, handle]
    caches: dict = field(default_factory=dict)  # (row, layer) -> [array, handle]

    @property
    def z_last(self) -> np.ndarray:
        return self.outputs[-1][0]


class _Executor:
    def __init__(self, spec: NetworkSpec, params: ParamSet, plan: RowPlan, meter: MemoryMeter | None):
        self.spec = spec
        self.params = params
        self.plan = plan
        self.meter = meter
        self.carries: dict = {}

    # -- metering ----------------------------------------------------------
    def _alloc(self, array, category) -> list:
        if self.meter is None:
            return []
        return [self.meter.alloc_array(array, category)]

    def _alloc_block(self, seg: SegmentPlan, layer: int, r: int, array) -> list:
        if self.meter is None:
            return []
        if seg.mode != "overl":
            return [self.meter.alloc_array(array, Category.FEATURE_MAP)]
        lo, hi = seg.extended[layer][r]
        olo, ohi = seg.owned[layer][r]
        own_rows = max(0, min(hi, ohi) - max(lo, olo))
        per_row = array.size // max(hi - lo, 1)
        handles = [self.meter.alloc_elements(own_rows * per_row, Category.FEATURE_MAP)]
        if hi - lo > own_rows:
            handles.append(self.meter.alloc_elements((hi - lo - own_rows) * per_row, Category.OVERLAP_REPLICA))
        return handles

    def _free(self, handles) -> None:
        if self.meter is not None:
            for h in handles:
                self.meter.track_free(h)

    # -- row input assembly ------------------------------------------------
    def _input_block(self, seg: SegmentPlan, caches: dict, zin, layer: int, r: int, prev):
        """Stored input rows ``window`` of stage ``layer`` for row ``r``."""
        in_lo, in_hi, _, _ = seg.windows[layer][r]
        if layer - 1 == seg.first - 1:
            return zin[:, :, in_lo:in_hi]
        if seg.mode == "overl":
            return prev
        own_lo, _ = seg.owned[layer - 1][r]
        own_part = prev[:, :, max(in_lo, own_lo) - own_lo:in_hi - own_lo]
        if in_lo >= own_lo:
            return own_part
        if self.plan.sharing:
            entry = caches.get((r - 1, layer - 1))
            if entry is None:
                raise CorruptStateError(
                    f"share cache for row {r - 1} layer {layer - 1} missing when row {r} needs it")
            shared = entry[0]
        else:
            shape = (prev.shape[0], prev.shape[1], own_lo - in_lo, prev.shape[3])
            shared = np.zeros(shape)
        return np.concatenate([shared, own_part], axis=2)

    def _stage_fwd(self, seg, caches, zin, layer, r, prev):
        st = self.spec.stages[layer - 1]
        _, _, pt, pb = seg.windows[layer][r]
        x = self._input_block(seg, caches, zin, layer, r, prev)
        return stage_forward(st, self.params, x, stage_pad(st, pt, pb))

    # -- FP -----------------------------------------------------------------
    def segment_fp(self, seg: SegmentPlan, caches: dict, zin, out_category) -> list:
        pieces, piece_handles = [], []
        keep_cache = seg.mode == "2ps" and self.plan.sharing
        for r in range(seg.rows):
            cur, cur_h = None, []
            for layer in range(seg.first, seg.last + 1):
                out = self._stage_fwd(seg, caches, zin, layer, r, cur)
                out_h = self._alloc_block(seg, layer, r, out)
                if layer - 1 >= seg.first:
                    if keep_cache and r < seg.rows - 1:
                        lo, hi = seg.cache_rows[layer - 1][r]
                        if hi > lo:
                            own_lo = seg.owned[layer - 1][r][0]
                            block = cur[:, :, lo - own_lo:hi - own_lo].copy()
                            caches[(r, layer - 1)] = [block, self._alloc(block, Category.SHARE_CACHE)]
                    self._free(cur_h)
                cur, cur_h = out, out_h
            pieces.append(cur)
            piece_handles.extend(cur_h)
        z = np.concatenate(pieces, axis=2)
        self._free(piece_handles)
        return [z, self._alloc(z, out_category)]

    # -- BP -----------------------------------------------------------------
    def segment_bp(self, seg: SegmentPlan, caches: dict, zin, delta_out, grads: ParamSet,
                   need_input_grad: bool):
        dzin = np.zeros_like(zin) if need_input_grad else None
        dzin_h = self._alloc(dzin, Category.OTHER) if dzin is not None else []
        for r in reversed(range(seg.rows)):
            blocks, prev = {}, None
            for layer in range(seg.first, seg.last):
                prev = self._stage_fwd(seg, caches, zin, layer, r, prev)
                blocks[layer] = [prev, self._alloc_block(seg, layer, r, prev)]
            lo, hi = seg.owned[seg.last][r]
            delta = delta_out[:, :, lo:hi]
            for layer in range(seg.last, seg.first - 1, -1):
                st = self.spec.stages[layer - 1]
                in_lo, in_hi, pt, pb = seg.windows[layer][r]
                below = blocks[layer - 1][0] if layer - 1 >= seg.first else None
                x = self._input_block(seg, caches, zin, layer, r, below)
                need = layer > seg.first or need_input_grad
                dx, gw, gb = stage_backward(st, self.params, x, stage_pad(st, pt, pb), delta, need)
                if gw is not None:
                    grads[f"stage{layer}.w"] += gw
                    grads[f"stage{layer}.b"] += gb
                if layer - 1 >= seg.first:
                    delta = self._route_delta(seg, layer - 1, r, in_lo, in_hi, dx)
                    self._free(blocks.pop(layer - 1)[1])
                    entry = caches.pop((r - 1, layer - 1), None)
                    if entry is not None:
                        self._free(entry[1])
                elif dzin is not None:
                    dzin[:, :, in_lo:in_hi] += dx
        return dzin, dzin_h

    def _route_delta(self, seg: SegmentPlan, layer: int, r: int, in_lo: int, in_hi: int, dx):
        """Delta for row ``r``'s block at ``layer`` from its window-shaped ``dx``."""
        if seg.mode == "overl":
            return dx
        own_lo, own_hi = seg.owned[layer][r]
        d_own = np.zeros(dx.shape[:2] + (own_hi - own_lo, dx.shape[3]))
        start = max(in_lo, own_lo)
        d_own[:, :, start - own_lo:in_hi - own_lo] += dx[:, :, start - in_lo:]
        if in_lo < own_lo and self.plan.sharing:
            carry = dx[:, :, :own_lo - in_lo].copy()
            self.carries[(r - 1, layer)] = [carry, self._alloc(carry, Category.OTHER)]
        incoming = self.carries.pop((r, layer), None)
        if incoming is not None:
            c_lo = seg.cache_rows[layer][r][0]
            if incoming[0].shape[2] != own_hi - c_lo:
                raise CorruptStateError(f"delta carry for row {r} layer {layer} has the wrong extent")
            d_own[:, :, c_lo - own_lo:] += incoming[0]
            self._free(incoming[1])
        return d_own


def forward_rows(spec: NetworkSpec, params: ParamSet, batch, plan: RowPlan,
                 meter: MemoryMeter | None = None) -> RowState:
    """Row-centric FP of the conv stack. ``state.z_last`` is the full z^L."""
    if plan.mode == "column" or not plan.fp:
        raise InvalidArgumentError("forward_rows needs a row plan")
    x = as_tensor(batch)
    ex = _Executor(spec, params, plan, meter)
    state = RowState(x, [])
    zin = x
    for j, seg in enumerate(plan.fp):
        category = Category.FEATURE_MAP if j == len(plan.fp) - 1 else Category.CHECKPOINT
        caches = state.caches if plan.fp is plan.bp else {}
        out = ex.segment_fp(seg, caches, zin, category)
        state.outputs.append(out)
        zin = out[0]
    return state


def backward_rows(spec: NetworkSpec, params: ParamSet, state: RowState, delta_last, plan: RowPlan,
                  meter: MemoryMeter | None = None, need_input_grad: bool = False):
    """Row-centric BP. Returns ``(grads for conv stages, delta wrt input or None)``.

    Only conv-stack entries of the returned ParamSet are filled.
    """
    ex = _Executor(spec, params, plan, meter)
    grads = params.zeros_like()
    delta = np.asarray(delta_last, dtype=np.float64)
    for j in reversed(range(len(plan.bp))):
        seg = plan.bp[j]
        if plan.fp is not plan.bp and seg.mode == "2ps":
            raise CorruptStateError("2PS backward needs the share caches of the same plan's FP")
        zin = state.x if j == 0 else state.outputs[j - 1][0]
        need = j > 0 or need_input_grad
        dzin, dzin_h = ex.segment_bp(seg, state.caches, zin, delta, grads, need)
        ex._free(state.outputs[j][1])
        ex._free(dzin_h)
        delta = dzin
    if ex.carries:
        raise CorruptStateError(f"unconsumed delta carries: {sorted(ex.carries)}")
    if state.caches and plan.sharing:
        raise CorruptStateError(f"unconsumed share caches: {sorted(state.caches)}")
    return grads, delta


def rowwise_gradients(spec: NetworkSpec, params: ParamSet, batch, labels, plan: RowPlan,
                      meter: MemoryMeter | None = None, need_input_grad: bool = False):
    """Loss and all parameter gradients of one iteration under ``plan``.

    Returns ``(loss, grads, z_last, delta_input)``.
    """
    if plan.mode == "column":
        tape, loss = column.forward_full(spec, params, batch, labels, meter)
        return loss, column.backward_full(spec, params, tape), tape.zs[-1], None
    state = forward_rows(spec, params, batch, plan, meter)
    z_last = state.z_last
    logits, head_inputs = head_forward(spec, params, z_last)
    loss, delta_logits = softmax_xent(logits, labels)
    head_grads = params.zeros_like()
    delta_last = head_backward(spec, params, head_inputs, delta_logits, head_grads, z_last.shape)
    d_h = meter.alloc_array(delta_last, Category.OTHER) if meter is not None else None
    grads, d_in = backward_rows(spec, params, state, delta_last, plan, meter, need_input_grad)
    if meter is not None:
        meter.track_free(d_h)
    for name in grads:
        if name.startswith("fc"):
            grads[name] = head_grads[name]
    return loss, grads, z_last, d_in


def train_step_rowwise(spec: NetworkSpec, params: ParamSet, batch, labels, lr: float, plan: RowPlan,
                       meter: MemoryMeter | None = None):
    """One SGD step under ``plan``. Returns ``(new_params, loss)``."""
    handles = []
    if meter is not None:
        handles.append(meter.track_alloc(params.nbytes(meter.element_size), Category.PARAMS))
        handles.append(meter.track_alloc(params.nbytes(meter.element_size), Category.GRADS))
        handles.append(meter.alloc_array(np.asarray(batch), Category.OTHER))
    loss, grads, _, _ = rowwise_gradients(spec, params, batch, labels, plan, meter)
    if meter is not None:
        for h in handles:
            meter.track_free(h)
    return column.sgd_update(params, grads, lr), loss
