"""Memory cost models and row-partition planning.

Everything here is integer/rational arithmetic on shapes; nothing executes a
kernel. Layer indices follow the feature maps: layer 0 is the input, layer l
the output of stage l (1-based), layer L the last conv-stack output.

Row partitions are derived backwards from the last layer of a segment, so
every range maps through the shape law to exactly its successor range:

* 2PS: owned (disjoint) ranges at every layer. Row boundaries at layer l-1
  are ``(e - 1) * s + k - p`` for boundary ``e`` at layer l; the next row
  reads the ``k - s`` rows above its own block from a share cache.
* OverL: owned ranges at the last layer are an even split; each row then
  needs the full receptive field of its block (the extended range), which
  overlaps the neighbouring row's by ``o`` rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .errors import (
    DegeneratePartitionError,
    InfeasibleBudgetError,
    InfeasiblePlanError,
    InvalidArgumentError,
    OverlapExhaustionError,
)
from .netspec import NetworkSpec

MODES = ("column", "2ps", "overl", "2ps-h", "overl-h")


# ---------------------------------------------------------------------------
# Memory model and the closed-form bounds

@dataclass
class MemoryModel:
    """Feature-map sizes in elements; budget in bytes."""

    rho: list  # rho[l-1] = B * H^l * W^l * C^l for l = 1..L
    xi: int = 0
    budget: int | None = None
    element_size: int = 8
    batch: int = 1
    height: int = 1  # input height, upper bound for row counts

    def __post_init__(self):
        if not self.rho or any(r < 0 for r in self.rho) or self.xi < 0:
            raise InvalidArgumentError("memory model sizes must be non-negative")

    @property
    def rho_last(self) -> int:
        return self.rho[-1]

    @classmethod
    def from_spec(cls, spec: NetworkSpec, batch: int, budget: int | None = None,
                  element_size: int = 8, xi: int | None = None) -> "MemoryModel":
        rho = [batch * c * h * w for c, h, w in spec.shapes[1:]]
        if xi is None:
            xi = measure_xi(spec, batch)
        return cls(rho, xi, budget, element_size, batch, spec.input_dims[1])


def measure_xi(spec: NetworkSpec, batch: int) -> int:
    """Element count of the non-feature-map residents, read off a meter dry run.

    Params, their gradients, the input batch and the logits/loss delta.
    """
    from .meter import Category, MemoryMeter
    from .netspec import init_params

    meter = MemoryMeter(element_size=1)
    params = init_params(spec, 0)
    meter.track_alloc(sum(v.size for v in params.values()), Category.PARAMS)
    meter.track_alloc(sum(v.size for v in params.values()), Category.GRADS)
    c, h, w = spec.input_dims
    meter.track_alloc(batch * c * h * w, Category.OTHER)
    meter.track_alloc(2 * batch * spec.class_count, Category.OTHER)
    report = meter.snapshot()
    return sum(report.current[k] for k in (Category.PARAMS, Category.GRADS, Category.OTHER))


def omega_total(model: MemoryModel) -> int:
    """Bytes of all feature maps retained by column-wise training."""
    return sum(model.rho) * model.element_size


def _check_n(n):
    if not isinstance(n, int) or n < 1:
        raise InvalidArgumentError(f"row count must be an integer >= 1, got {n!r}")


def _omega_fp_elems(model: MemoryModel, n: int) -> Fraction:
    inner = model.rho[:-1]
    return (Fraction(max(inner), n) if inner else Fraction(0)) + model.rho_last


def _omega_bp_elems(model: MemoryModel, n: int) -> Fraction:
    return Fraction(sum(model.rho[:-1]), n) + model.rho_last


def omega_fp(model: MemoryModel, n: int) -> float:
    _check_n(n)
    return float(_omega_fp_elems(model, n) * model.element_size)


def omega_bp(model: MemoryModel, n: int) -> float:
    _check_n(n)
    return float(_omega_bp_elems(model, n) * model.element_size)


def _require_budget(model: MemoryModel):
    if model.budget is None:
        raise InvalidArgumentError("a memory budget is required")
    floor_bytes = (model.rho_last + model.xi) * model.element_size
    if model.budget <= floor_bytes:
        raise InfeasibleBudgetError(
            f"budget {model.budget} B does not exceed last-layer map + residual ({floor_bytes} B)")


def solve_n(model: MemoryModel, phase: str) -> int:
    """Smallest N with omega_phase(N) + xi < M."""
    _require_budget(model)
    f = {"FP": _omega_fp_elems, "BP": _omega_bp_elems}[phase.upper()]
    limit = Fraction(model.budget, model.element_size)
    for n in range(1, model.height + 1):
        if f(model, n) + model.xi < limit:
            return n
    raise InfeasibleBudgetError(f"no N <= {model.height} fits the {phase} phase in {model.budget} B")


# ---------------------------------------------------------------------------
# Checkpoint segmentation

def plan_checkpoints(spec_or_l, segments="auto") -> list:
    """Split stages 1..L into contiguous segments of near-equal length.

    Returns ``[(first, last), ...]``; longer segments come first. ``"auto"``
    uses ceil(sqrt(L)) segments.
    """
    n_layers = spec_or_l.L if isinstance(spec_or_l, NetworkSpec) else int(spec_or_l)
    if segments == "auto" or segments is None:
        segments = math.ceil(math.sqrt(n_layers))
    segments = int(segments)
    if not 1 <= segments <= n_layers:
        raise InvalidArgumentError(f"segments must be in [1, {n_layers}], got {segments}")
    base, extra = divmod(n_layers, segments)
    out, first = [], 1
    for j in range(segments):
        size = base + (1 if j < extra else 0)
        out.append((first, first + size - 1))
        first += size
    return out


# ---------------------------------------------------------------------------
# Row plans

def even_split(total: int, n: int) -> list:
    """``n`` consecutive ranges tiling [0, total); remainder to the earliest."""
    base, extra = divmod(total, n)
    out, lo = [], 0
    for r in range(n):
        hi = lo + base + (1 if r < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


@dataclass
class SegmentPlan:
    mode: str  # "2ps" | "overl"
    first: int
    last: int
    rows: int
    owned: dict  # layer -> per-row (lo, hi), tiling [0, H^layer)
    windows: dict  # stage -> per-row (in_lo, in_hi, pad_top, pad_bottom)
    extended: dict = field(default_factory=dict)  # OverL: layer -> per-row needed range
    cache_rows: dict = field(default_factory=dict)  # 2PS: layer -> per-row range cached for row r+1
    share: dict = field(default_factory=dict)  # 2PS: layer -> max(k - s, 0) of the consuming stage
    overlap: dict = field(default_factory=dict)  # OverL: layer -> o (rows shared by consecutive rows)
    split: dict = field(default_factory=dict)  # OverL: layer -> (a, b)

    def computed(self, layer: int) -> list:
        """Per-row ranges actually materialised at ``layer``."""
        return self.extended[layer] if self.mode == "overl" else self.owned[layer]


@dataclass
class RowPlan:
    mode: str
    segments: list  # [(first, last)]
    fp: list  # SegmentPlan per segment
    bp: list
    sharing: bool = True  # False only for the fault-injection control

    @property
    def rows_fp(self) -> list:
        return [s.rows for s in self.fp]

    @property
    def rows_bp(self) -> list:
        return [s.rows for s in self.bp]

    @property
    def n_fp(self) -> int:
        return max(self.rows_fp, default=1)

    @property
    def n_bp(self) -> int:
        return max(self.rows_bp, default=1)

    @property
    def total_rows(self) -> int:
        """Sum over stages of the rows each stage is split into (BP plan)."""
        return sum(s.rows * (s.last - s.first + 1) for s in self.bp)


def overlap_recursion(spec: NetworkSpec, first: int, last: int) -> dict:
    """Signed overlap between consecutive rows' extended ranges, per layer.

    o^last = 0 and o^(l-1) = (o^l - 1) * s^l + k^l, valid at interior
    boundaries untouched by the map edges. Negative values are gaps.
    """
    o = {last: 0}
    for l in range(last, first - 1, -1):
        st = spec.stages[l - 1]
        o[l - 1] = (o[l] - 1) * st.s + st.k
    return o


def _map_boundary(st, e: int) -> int:
    """First input row not needed by output rows [0, e) of stage ``st``."""
    return (e - 1) * st.s + st.k - st.p


def _mapped(spec: NetworkSpec, first: int, last: int, b: int) -> dict:
    """Images of last-layer boundary ``b`` at layers first-1 .. last."""
    out = {last: b}
    for l in range(last, first - 1, -1):
        out[l - 1] = b = _map_boundary(spec.stages[l - 1], b) if b < spec.shapes[l][1] else spec.shapes[l - 1][1]
    return out


def _boundary_pair_ok(spec: NetworkSpec, first: int, last: int, lower: dict, upper: dict) -> bool:
    """Can consecutive boundaries ``lower`` < ``upper`` (per-layer images) coexist?

    The block between them must be nonempty at every layer, and the next
    row's input window at each stage must not reach above ``lower``.
    """
    for l in range(first - 1, last + 1):
        if not lower[l] < upper[l]:
            return False
    for l in range(first, last):
        st = spec.stages[l]
        if upper[l + 1] < spec.shapes[l + 1][1] and upper[l + 1] * st.s - st.p < lower[l]:
            return False
    return True


def plan_segment_2ps(spec: NetworkSpec, first: int, last: int, n: int) -> SegmentPlan:
    _check_n(n)
    h_last = spec.shapes[last][1]
    if n > h_last:
        raise DegeneratePartitionError(f"{n} rows but layer {last} has only {h_last} rows")
    # Mapping a boundary back through a stage pushes it down by k - s - p rows,
    # so an even last-layer split can starve lower rows at shallower layers.
    # Pass 1 (bottom-up) finds each boundary's largest feasible value; pass 2
    # (top-down) takes the even-split target capped by that envelope, raised
    # only as far as the row above needs. A valid even split is kept as is.
    def ok(lower_b, upper_map):
        return _boundary_pair_ok(spec, first, last, _mapped(spec, first, last, lower_b), upper_map)

    envelope = [0] * (n - 1)
    upper = _mapped(spec, first, last, h_last)
    for r in reversed(range(n - 1)):
        b = h_last - 1 if r == n - 2 else envelope[r + 1] - 1
        while b >= 1 and not ok(b, upper):
            b -= 1
        if b < 1:
            raise DegeneratePartitionError(f"no valid split of layer {last} into {n} rows")
        envelope[r] = b
        upper = _mapped(spec, first, last, b)
    even = [hi for _, hi in even_split(h_last, n)[:-1]]
    chosen = []
    for r in range(n - 1):
        b = min(even[r], envelope[r])
        if chosen:
            b = max(b, chosen[-1] + 1)
            while not ok(chosen[-1], _mapped(spec, first, last, b)):
                b += 1
        chosen.append(b)
    bounds = {l: [] for l in range(first - 1, last + 1)}
    for b in chosen:
        for l, e in _mapped(spec, first, last, b).items():
            bounds[l].append(e)
    owned = {}
    for l, inner in bounds.items():
        h = spec.shapes[l][1]
        edges = [0] + inner + [h]
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise DegeneratePartitionError(f"an owned range at layer {l} would be empty (boundaries {edges})")
        owned[l] = list(zip(edges, edges[1:]))
    windows = {l: [spec.stages[l - 1].window(lo, hi) for lo, hi in owned[l]] for l in range(first, last + 1)}
    cache_rows, share = {}, {}
    for l in range(first, last):
        share[l] = max(spec.stages[l].k - spec.stages[l].s, 0)
        rows = []
        for r in range(n - 1):
            lo, hi = owned[l][r]
            need_lo = windows[l + 1][r + 1][0]
            if need_lo < lo:
                raise DegeneratePartitionError(
                    f"row {r + 2} at stage {l + 1} needs rows above row {r + 1}'s block at layer {l}")
            rows.append((min(need_lo, hi), hi))
        cache_rows[l] = rows
    return SegmentPlan("2ps", first, last, n, owned, windows, cache_rows=cache_rows, share=share)


def plan_segment_overlap(spec: NetworkSpec, first: int, last: int, n: int) -> SegmentPlan:
    _check_n(n)
    h_last = spec.shapes[last][1]
    if n > h_last:
        raise OverlapExhaustionError(
            f"N={n} exceeds the {h_last} rows of layer {last}: rows cannot own any output")
    recursion = overlap_recursion(spec, first, last)
    o_in = recursion[first - 1]
    h_in = spec.shapes[first - 1][1]
    if n > 1 and o_in > 0 and n * o_in > h_in:
        raise OverlapExhaustionError(
            f"N={n} > H/o = {h_in}/{o_in}: not enough rows to hold the overlapped data")
    ext = {last: even_split(h_last, n)}
    windows = {}
    for l in range(last, first - 1, -1):
        st = spec.stages[l - 1]
        windows[l] = [st.window(lo, hi) for lo, hi in ext[l]]
        ext[l - 1] = [(w[0], w[1]) for w in windows[l]]
    owned, overlap, split = {}, {}, {}
    for l in range(first - 1, last + 1):
        h = spec.shapes[l][1]
        edges = [0]
        for r in range(n - 1):
            upper_hi = ext[l][r][1]
            lower_lo = ext[l][r + 1][0]
            if l < last and upper_hi - lower_lo != recursion[l] and n > 1:
                raise OverlapExhaustionError(
                    f"N={n}: rows at layer {l} are too thin for the replicated region "
                    f"(overlap {upper_hi - lower_lo} != {recursion[l]})")
            o = upper_hi - lower_lo
            edge = lower_lo + (o + 1) // 2 if o > 0 else upper_hi
            edges.append(edge)
        edges.append(h)
        if any(b < a for a, b in zip(edges, edges[1:])):
            raise OverlapExhaustionError(f"N={n}: extended ranges at layer {l} are not ordered")
        owned[l] = list(zip(edges, edges[1:]))
        o = max(recursion[l], 0) if n > 1 else 0
        overlap[l] = o
        split[l] = (o - o // 2, o // 2) if o > 0 else (0, 0)
    return SegmentPlan("overl", first, last, n, owned, windows, extended=ext, overlap=overlap, split=split)


def _rows_list(rows, n_segments):
    if isinstance(rows, int):
        return [rows] * n_segments
    rows = list(rows)
    if len(rows) != n_segments:
        raise InvalidArgumentError(f"{len(rows)} row counts for {n_segments} segments")
    return rows


def build_plan(spec: NetworkSpec, mode: str, rows=1, segments=None, rows_fp=None,
               sharing: bool = True) -> RowPlan:
    """Plan with explicit row counts (an int, or one per checkpoint segment).

    ``segments`` is a count, ``"auto"``, or an explicit ``[(first, last)]``
    list; it only applies to the hybrid modes. 2PS uses one row count for both
    phases because BP consumes the share caches FP produced; OverL may use a
    different ``rows_fp``.
    """
    if mode not in MODES:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    if mode == "column":
        return RowPlan("column", [], [], [])
    hybrid = mode.endswith("-h")
    if not hybrid:
        segs = [(1, spec.L)]
    elif isinstance(segments, (list, tuple)):
        segs = [tuple(s) for s in segments]
    else:
        segs = plan_checkpoints(spec, segments if segments is not None else "auto")
    base = mode.split("-")[0]
    maker = plan_segment_2ps if base == "2ps" else plan_segment_overlap
    rows_bp = _rows_list(rows, len(segs))
    bp = [maker(spec, f, l, n) for (f, l), n in zip(segs, rows_bp)]
    if base == "2ps" or rows_fp is None:
        fp = bp
    else:
        fp = [maker(spec, f, l, n) for (f, l), n in zip(segs, _rows_list(rows_fp, len(segs)))]
    return RowPlan(mode, segs, fp, bp, sharing)


# ---------------------------------------------------------------------------
# Predicted peaks: a size-only model of the executor's schedule

def _rowsize(spec, batch, layer, rng) -> int:
    c, _, w = spec.shapes[layer]
    return batch * (rng[1] - rng[0]) * w * c


def _cache_elems(spec, batch, seg: SegmentPlan, r: int, upto: int | None = None) -> int:
    if seg.mode != "2ps" or r >= seg.rows - 1:
        return 0
    stop = seg.last if upto is None else min(upto, seg.last)
    return sum(_rowsize(spec, batch, l, seg.cache_rows[l][r]) for l in range(seg.first, stop))


def _segment_fp_peak(spec, batch, seg: SegmentPlan, base: int) -> int:
    best = 0
    pieces = caches = 0
    ranges = seg.computed
    for r in range(seg.rows):
        for l in range(seg.first, seg.last + 1):
            cur = _rowsize(spec, batch, l - 1, ranges(l - 1)[r]) if l > seg.first else 0
            out = _rowsize(spec, batch, l, ranges(l)[r])
            # caches of this row for layers first..l-1 exist once stage l has run
            mine = _cache_elems(spec, batch, seg, r, upto=l)
            best = max(best, base + pieces + caches + mine + cur + out)
        pieces += _rowsize(spec, batch, seg.last, seg.owned[seg.last][r])
        caches += _cache_elems(spec, batch, seg, r)
    return best


def _segment_bp_peak(spec, batch, seg: SegmentPlan, base: int) -> int:
    out_elems = spec.shapes[seg.last][0] * spec.shapes[seg.last][1] * spec.shapes[seg.last][2] * batch
    best = 0
    for r in range(seg.rows):
        older = sum(_cache_elems(spec, batch, seg, q) for q in range(r))
        blocks = sum(_rowsize(spec, batch, l, seg.computed(l)[r]) for l in range(seg.first, seg.last))
        best = max(best, base + out_elems + older + blocks)
    return best


def predict_peak(spec: NetworkSpec, plan: RowPlan, batch: int, element_size: int = 8) -> dict:
    """Predicted high-water marks (bytes) of feature-map data per phase.

    Covers the FeatureMap, ShareCache, OverlapReplica and Checkpoint categories.
    """
    rho = [batch * c * h * w for c, h, w in spec.shapes[1:]]
    if plan.mode == "column":
        total = sum(rho) * element_size
        return {"fp": total, "bp": total, "peak": total}
    fp_peak = bp_peak = 0
    base = 0
    for seg_fp, seg_bp in zip(plan.fp, plan.bp):
        fp_peak = max(fp_peak, _segment_fp_peak(spec, batch, seg_fp, base))
        bp_peak = max(bp_peak, _segment_bp_peak(spec, batch, seg_bp, base))
        base += rho[seg_bp.last - 1] + sum(_cache_elems(spec, batch, seg_bp, r) for r in range(seg_bp.rows))
    return {"fp": fp_peak * element_size, "bp": bp_peak * element_size,
            "peak": max(fp_peak, bp_peak) * element_size}


def share_cache_elems(spec: NetworkSpec, plan: RowPlan, batch: int) -> int:
    """Total share-cache elements held between FP and BP."""
    return sum(_cache_elems(spec, batch, seg, r) for seg in plan.bp for r in range(seg.rows))


# ---------------------------------------------------------------------------
# Budget-driven planners

def _first_row_bound_2ps(spec, model: MemoryModel, seg: SegmentPlan) -> Fraction:
    """Σ_{l<L} rho_1^l + B (N-1) Σ_{l<L} share^l W^l C^l + rho^L + xi (elements)."""
    b = model.batch
    first_row = sum(_rowsize(spec, b, l, seg.owned[l][0]) for l in range(1, spec.L))
    caches = sum(seg.share[l] * spec.shapes[l][2] * spec.shapes[l][0] for l in range(1, spec.L))
    return Fraction(first_row + b * (seg.rows - 1) * caches + model.rho_last + model.xi)


def _overlap_bound(spec, model: MemoryModel, seg: SegmentPlan) -> Fraction:
    """(Σ_{l<L} rho^l + B (N-1) Σ_l o^l W^l C^l) / N + rho^L + xi (elements)."""
    b, n = model.batch, seg.rows
    replicated = sum(seg.overlap[l] * spec.shapes[l][2] * spec.shapes[l][0] for l in range(1, spec.L + 1))
    return Fraction(sum(model.rho[:-1]) + b * (n - 1) * replicated, n) + model.rho_last + model.xi


def _scan(spec, model, candidate, fits, kind):
    """Smallest N in [1, H^L] whose plan is valid and fits; infeasibility names the bound."""
    _require_budget(model)
    reason = None
    for n in range(1, spec.shapes[-1][1] + 1):
        try:
            plan = candidate(n)
        except InfeasiblePlanError as exc:
            reason = exc
            continue
        if fits(plan):
            return plan
    if isinstance(reason, OverlapExhaustionError):
        raise OverlapExhaustionError(f"{kind}: budget not met before overlap exhaustion ({reason})")
    raise InfeasibleBudgetError(f"{kind}: no row count fits the {model.budget} B budget")


def _fits_schedule(spec, model):
    limit = model.budget

    def fits(plan):
        return predict_peak(spec, plan, model.batch, model.element_size)["peak"] + model.xi * model.element_size < limit
    return fits


def plan_2ps(spec: NetworkSpec, model: MemoryModel, budget: int | None = None, rows=None,
             segments=None) -> RowPlan:
    """2PS plan. With ``rows`` given it is built directly; otherwise the
    smallest N (hence the tallest first row) meeting the budget is chosen."""
    if budget is not None:
        model.budget = budget
    mode = "2ps" if segments in (None, 1) else "2ps-h"
    if rows is not None:
        return build_plan(spec, mode, rows, segments)
    if mode == "2ps":
        limit = Fraction(model.budget or 0, model.element_size)
        return _scan(spec, model, lambda n: build_plan(spec, mode, n),
                     lambda p: _first_row_bound_2ps(spec, model, p.bp[0]) < limit, "2ps")
    return _scan(spec, model, lambda n: build_plan(spec, mode, n, segments), _fits_schedule(spec, model), mode)


def plan_overlap(spec: NetworkSpec, model: MemoryModel, budget: int | None = None, rows=None,
                 rows_fp=None, segments=None) -> RowPlan:
    """OverL plan; N_BP from the averaged per-row bound, N_FP from the FP schedule."""
    if budget is not None:
        model.budget = budget
    mode = "overl" if segments in (None, 1) else "overl-h"
    if rows is not None:
        return build_plan(spec, mode, rows, segments, rows_fp)
    if mode == "overl":
        limit = Fraction(model.budget or 0, model.element_size)
        bp_plan = _scan(spec, model, lambda n: build_plan(spec, mode, n),
                        lambda p: _overlap_bound(spec, model, p.bp[0]) < limit, "overl")
    else:
        bp_plan = _scan(spec, model, lambda n: build_plan(spec, mode, n, segments),
                        _fits_schedule(spec, model), mode)
    if rows_fp is None:
        limit = model.budget - model.xi * model.element_size
        for n in range(1, bp_plan.n_bp + 1):
            try:
                cand = build_plan(spec, mode, bp_plan.rows_bp, bp_plan.segments, n)
            except InfeasiblePlanError:
                continue
            if predict_peak(spec, cand, model.batch, model.element_size)["fp"] < limit:
                rows_fp = n
                break
        else:
            rows_fp = bp_plan.rows_bp
    return build_plan(spec, mode, bp_plan.rows_bp, bp_plan.segments, rows_fp)


def make_plan(spec: NetworkSpec, mode: str, batch: int, rows=None, segments=None,
              budget: int | None = None, element_size: int = 8, xi: int | None = None,
              rows_fp=None) -> RowPlan:
    """Front door used by the CLI: explicit rows, budget-solved rows, or N=1.

    For hybrid modes an integer ``rows`` caps each segment (see ``capped_plan``).
    """
    if mode == "column":
        return build_plan(spec, "column")
    hybrid = mode.endswith("-h")
    segs = (segments if segments is not None else "auto") if hybrid else None
    if hybrid and segs is not None and not isinstance(segs, (list, tuple)):
        segs = plan_checkpoints(spec, segs)
    if rows is None and budget is None:
        rows = 1
    if hybrid and isinstance(rows, int) and rows_fp is None:
        # an explicit N for a hybrid mode is a per-segment upper bound
        return capped_plan(spec, mode, rows, segs)
    model = MemoryModel.from_spec(spec, batch, budget, element_size, xi)
    if mode.startswith("2ps"):
        return plan_2ps(spec, model, rows=rows, segments=segs if hybrid else None)
    return plan_overlap(spec, model, rows=rows, rows_fp=rows_fp, segments=segs if hybrid else None)


def capped_plan(spec: NetworkSpec, mode: str, n: int, segments=None) -> RowPlan:
    """Hybrid plan where each segment takes the largest feasible row count <= ``n``.

    Deep segments of a pooled network are only a few rows high, so one N for
    every segment is rarely feasible. Non-hybrid modes get ``build_plan``
    unchanged, including its infeasibility errors.
    """
    if not mode.endswith("-h"):
        return build_plan(spec, mode, n)
    _check_n(n)
    segs = segments if isinstance(segments, (list, tuple)) else plan_checkpoints(spec, segments or "auto")
    maker = plan_segment_2ps if mode.startswith("2ps") else plan_segment_overlap
    rows = []
    for first, last in segs:
        for k in range(min(n, spec.shapes[last][1]), 0, -1):
            try:
                maker(spec, first, last, k)
            except InfeasiblePlanError:
                continue
            rows.append(k)
            break
    return build_plan(spec, mode, rows, segs)


def minimizing_rows(spec: NetworkSpec, mode: str, batch: int, segments=None, n_max: int | None = None,
                    element_size: int = 8) -> tuple:
    """``(N*, peak)``: the smallest row count reaching the minimal predicted peak.

    Hybrid modes cap N per segment (see ``capped_plan``).
    """
    if mode == "column":
        return 1, predict_peak(spec, build_plan(spec, "column"), batch, element_size)["peak"]
    if n_max is None:
        n_max = max(h for _, h, _ in spec.shapes[1:]) if mode.endswith("-h") else spec.shapes[-1][1]
    best = None
    for n in range(1, n_max + 1):
        try:
            plan = capped_plan(spec, mode, n, segments)
        except InfeasiblePlanError:
            continue
        peak = predict_peak(spec, plan, batch, element_size)["peak"]
        if best is None or peak < best[1]:
            best = (n, peak)
    if best is None:
        raise InfeasiblePlanError(f"no valid {mode} plan up to N={n_max}")
    return best


def max_total_rows(spec: NetworkSpec, mode: str, batch: int, budget: int, segments=None,
                   element_size: int = 8, xi: int | None = None):
    """Largest admissible total row count (Σ stages x rows) under ``budget``.

    Non-hybrid modes scan the single N exhaustively. Hybrid modes pick one N
    per segment by greedy coordinate ascent from all-ones, so the returned
    value is a lower bound on their true maximum. Returns ``(total, plan)``
    or ``(0, None)`` when nothing fits.
    """
    xi = measure_xi(spec, batch) if xi is None else xi
    limit = budget - xi * element_size

    def ok(plan):
        return predict_peak(spec, plan, batch, element_size)["peak"] < limit

    if not mode.endswith("-h"):
        best = (0, None)
        for n in range(1, spec.shapes[-1][1] + 1):
            try:
                plan = build_plan(spec, mode, n)
            except InfeasiblePlanError:
                continue
            if ok(plan) and plan.total_rows > best[0]:
                best = (plan.total_rows, plan)
        return best
    segs = segments if isinstance(segments, (list, tuple)) else plan_checkpoints(spec, segments or "auto")
    rows = [1] * len(segs)
    try:
        plan = build_plan(spec, mode, rows, segs)
    except InfeasiblePlanError:
        return 0, None
    if not ok(plan):
        return 0, None
    order = sorted(range(len(segs)), key=lambda j: -(segs[j][1] - segs[j][0] + 1))
    improved = True
    while improved:
        improved = False
        for j in order:
            trial = list(rows)
            trial[j] += 1
            if trial[j] > spec.shapes[segs[j][1]][1]:
                continue
            try:
                cand = build_plan(spec, mode, trial, segs)
            except InfeasiblePlanError:
                continue
            if ok(cand):
                rows, plan, improved = trial, cand, True
    return plan.total_rows, plan


# ---------------------------------------------------------------------------
# FLOP model

@dataclass
class FlopModel:
    tau: int
    iota: int
    totals: dict


def estimate_flops(spec: NetworkSpec, plan: RowPlan, batch: int) -> FlopModel:
    """tau: conv FLOPs on original data; iota: on replicated (overlapped) data."""
    tau = iota = 0
    segs = plan.bp or [SegmentPlan("overl", 1, spec.L, 1, {}, {})]
    for seg in segs:
        rec = overlap_recursion(spec, seg.first, seg.last)
        for l in range(seg.first, seg.last + 1):
            st = spec.stages[l - 1]
            if st.kind != "conv":
                continue
            per_row = 2 * st.k * st.k * batch * st.c_in * st.c_out * st.w_out
            tau += per_row * st.h_out
            iota += per_row * (seg.rows - 1) * max(rec[l], 0)
    totals = {"column": 3 * tau, "2ps": 4 * tau, "overl": 4 * (tau + iota)}
    totals["2ps-h"] = totals["2ps"]
    totals["overl-h"] = totals["overl"]
    return FlopModel(tau, iota, totals)


# ---------------------------------------------------------------------------
# Plan report (JSON-ready)

def plan_report(spec: NetworkSpec, plan: RowPlan, batch: int, element_size: int = 8,
                xi: int | None = None, budget: int | None = None) -> dict:
    model = MemoryModel.from_spec(spec, batch, budget, element_size, xi)
    flops = estimate_flops(spec, plan, batch)
    report = {
        "mode": plan.mode,
        "batch": batch,
        "element_size": element_size,
        "budget_bytes": budget,
        "xi_bytes": model.xi * element_size,
        "omega_total_bytes": omega_total(model),
        "N_FP": plan.n_fp,
        "N_BP": plan.n_bp,
        "total_rows": plan.total_rows,
        "segments": [list(s) for s in plan.segments],
        "predicted_peak_bytes": predict_peak(spec, plan, batch, element_size),
        "flops": {"tau": flops.tau, "iota": flops.iota, "total": flops.totals[plan.mode]},
        "rows": [],
    }
    if plan.mode != "column":
        report["share_cache_bytes"] = share_cache_elems(spec, plan, batch) * element_size
        try:
            n_star, peak = minimizing_rows(spec, plan.mode, batch, plan.segments, element_size=element_size)
            report["N_star"] = n_star
            report["N_star_peak_bytes"] = peak
        except InfeasiblePlanError:
            report["N_star"] = None
        for seg in plan.bp:
            entry = {"first": seg.first, "last": seg.last, "rows": seg.rows, "layers": {}}
            for l in range(seg.first - 1, seg.last + 1):
                layer = {"owned": [list(r) for r in seg.owned[l]]}
                c, _, w = spec.shapes[l]
                if seg.mode == "overl":
                    layer["extended"] = [list(r) for r in seg.extended[l]]
                    layer["overlap_rows"] = seg.overlap[l]
                    layer["overlap_bytes"] = batch * seg.overlap[l] * w * c * element_size
                elif l in seg.cache_rows:
                    layer["share_rows"] = seg.share[l]
                    layer["cache_bytes"] = batch * sum(hi - lo for lo, hi in seg.cache_rows[l]) * w * c * element_size
                entry["layers"][str(l)] = layer
            report["rows"].append(entry)
    return report
