"""Network description, shape propagation, parameter init and JSON config I/O."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ConfigError, InvalidShapeError, ShapeUnderflowError
from .kernels import out_dim
from .rng import SplitMix64


@dataclass(frozen=True)
class Conv:
    c_out: int
    k: int
    s: int = 1
    p: int = 0
    c_in: int | None = None


@dataclass(frozen=True)
class Pool:
    kind: str
    k: int
    s: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FC:
    out_width: int
    in_width: int | None = None


LayerSpec = Union[Conv, Pool, ReLU, Flatten, FC]


@dataclass(frozen=True)
class Stage:
    """A shape-changing conv-stack layer with its propagated geometry.

    ``index`` is 1-based: the stage maps feature map ``index - 1`` to ``index``.
    ``relu_in`` means a ReLU sits between the stored input and this stage, so
    the stage consumes ``relu(z[index - 1])``.
    """

    index: int
    kind: str  # "conv" | "pool"
    k: int
    s: int
    p: int
    c_in: int
    c_out: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    relu_in: bool = False
    pool_kind: str | None = None

    def window(self, lo: int, hi: int):
        """Input rows needed for output rows ``[lo, hi)``.

        Returns ``(in_lo, in_hi, pad_top, pad_bottom)`` where the window has been
        clipped to ``[0, h_in)`` and the clipped part becomes zero padding. Only
        the map's true outer edges can produce padding (semi-closed padding).
        """
        start = lo * self.s - self.p
        stop = (hi - 1) * self.s + self.k - self.p
        return max(start, 0), min(stop, self.h_in), max(-start, 0), max(stop - self.h_in, 0)


@dataclass(frozen=True)
class HeadLayer:
    index: int
    in_width: int
    out_width: int
    relu_in: bool = False


@dataclass
class NetworkSpec:
    input_dims: tuple  # (C, H, W)
    layers: list
    class_count: int
    stages: list = field(init=False, repr=False)
    head: list = field(init=False, repr=False)
    shapes: list = field(init=False, repr=False)

    def __post_init__(self):
        self.input_dims = tuple(int(v) for v in self.input_dims)
        self.stages, self.head, self.shapes = _build(self)

    @property
    def L(self) -> int:
        return len(self.stages)

    @property
    def flatten_width(self) -> int:
        c, h, w = self.shapes[-1]
        return c * h * w

    def to_dict(self) -> dict:
        c, h, w = self.input_dims
        layers = []
        for layer in self.layers:
            if isinstance(layer, Conv):
                layers.append({"type": "conv", "c_out": layer.c_out, "k": layer.k, "s": layer.s, "p": layer.p})
            elif isinstance(layer, Pool):
                layers.append({"type": "pool", "kind": layer.kind, "k": layer.k, "s": layer.s})
            elif isinstance(layer, ReLU):
                layers.append({"type": "relu"})
            elif isinstance(layer, Flatten):
                layers.append({"type": "flatten"})
            else:
                layers.append({"type": "fc", "out": layer.out_width})
        return {"input": {"c": c, "h": h, "w": w}, "classes": self.class_count, "layers": layers}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def with_input(self, h: int, w: int | None = None) -> "NetworkSpec":
        """Same layers on a different input size; FC widths are re-inferred."""
        layers = [FC(l.out_width) if isinstance(l, FC) else
                  (Conv(l.c_out, l.k, l.s, l.p) if isinstance(l, Conv) else l) for l in self.layers]
        return NetworkSpec((self.input_dims[0], h, h if w is None else w), layers, self.class_count)


def _build(spec: NetworkSpec):
    c, h, w = spec.input_dims
    if min(c, h, w) < 1:
        raise ConfigError(f"input dims must be >= 1, got {spec.input_dims}")
    if spec.class_count < 1:
        raise ConfigError("classes must be >= 1")
    stages, head, shapes = [], [], [(c, h, w)]
    relu_pending = False
    flattened = False
    width = None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, ReLU):
            relu_pending = True
            continue
        if isinstance(layer, (Conv, Pool)):
            if flattened:
                raise ConfigError("conv/pool layer after flatten", i)
            if layer.k < 1 or layer.s < 1:
                raise ConfigError("k and s must be >= 1", i)
            if isinstance(layer, Conv):
                if layer.p < 0 or layer.c_out < 1:
                    raise ConfigError("p must be >= 0 and c_out >= 1", i)
                if layer.c_in is not None and layer.c_in != c:
                    raise ConfigError(f"c_in {layer.c_in} != propagated channels {c}", i)
                kind, p, c_out, pool_kind = "conv", layer.p, layer.c_out, None
            else:
                if layer.kind not in ("max", "avg"):
                    raise ConfigError(f"unknown pool kind {layer.kind!r}", i)
                kind, p, c_out, pool_kind = "pool", 0, c, layer.kind
            try:
                ho = out_dim(h, layer.k, layer.s, p, p)
                wo = out_dim(w, layer.k, layer.s, p, p)
            except InvalidShapeError as exc:
                raise ShapeUnderflowError(f"layer {i}: {exc}") from None
            stages.append(Stage(len(stages) + 1, kind, layer.k, layer.s, p, c, c_out,
                                h, w, ho, wo, relu_pending, pool_kind))
            relu_pending = False
            c, h, w = c_out, ho, wo
            shapes.append((c, h, w))
        elif isinstance(layer, Flatten):
            if flattened:
                raise ConfigError("more than one flatten", i)
            if not stages:
                raise ConfigError("flatten before any conv/pool layer", i)
            flattened = True
            width = c * h * w
        elif isinstance(layer, FC):
            if not flattened:
                raise ConfigError("fc before flatten", i)
            if layer.in_width is not None and layer.in_width != width:
                raise ConfigError(f"fc in_width {layer.in_width} != incoming width {width}", i)
            if layer.out_width < 1:
                raise ConfigError("fc out must be >= 1", i)
            head.append(HeadLayer(len(head), width, layer.out_width, relu_pending))
            relu_pending = False
            width = layer.out_width
        else:
            raise ConfigError(f"unknown layer {layer!r}", i)
    if not head:
        raise ConfigError("network needs at least one fc layer after flatten")
    if relu_pending:
        raise ConfigError("relu after the final fc layer is not supported", len(spec.layers) - 1)
    if width != spec.class_count:
        raise ConfigError(f"final fc width {width} != classes {spec.class_count}", len(spec.layers) - 1)
    return stages, head, shapes


def parse_config(text: str) -> NetworkSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    try:
        inp = doc["input"]
        dims = (int(inp["c"]), int(inp["h"]), int(inp["w"]))
        classes = int(doc["classes"])
        raw_layers = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"missing or malformed field: {exc}") from None
    layers = []
    for i, entry in enumerate(raw_layers):
        try:
            kind = entry["type"]
            if kind == "conv":
                layers.append(Conv(int(entry["c_out"]), int(entry["k"]), int(entry.get("s", 1)),
                                   int(entry.get("p", 0)), entry.get("c_in")))
            elif kind == "pool":
                layers.append(Pool(entry.get("kind", "max"), int(entry["k"]), int(entry.get("s", entry["k"]))))
            elif kind == "relu":
                layers.append(ReLU())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind == "fc":
                layers.append(FC(int(entry["out"]), entry.get("in")))
            else:
                raise ConfigError(f"unknown layer type {kind!r}", i)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed layer: {exc}", i) from None
    return NetworkSpec(dims, layers, classes)


def load_config(path) -> NetworkSpec:
    with open(path) as f:
        return parse_config(f.read())


def propagate_shapes(spec: NetworkSpec) -> list:
    """Per-layer ``(C, H, W)``; entry 0 is the input, entry l the output of stage l."""
    return list(spec.shapes)


# ---------------------------------------------------------------------------
# Parameters

class ParamSet(dict):
    """Ordered name -> float64 array mapping (``stage{l}.w``, ``fc{j}.b``...)."""

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self.items())

    def nbytes(self, element_size: int = 8) -> int:
        return sum(v.size for v in self.values()) * element_size


def init_params(spec: NetworkSpec, seed: int) -> ParamSet:
    """Uniform in [-a, a] with a = fan_in ** -0.5; biases zero; SplitMix64 stream."""
    rng = SplitMix64(seed)
    params = ParamSet()
    for st in spec.stages:
        if st.kind != "conv":
            continue
        a = (st.c_in * st.k * st.k) ** -0.5
        params[f"stage{st.index}.w"] = rng.uniform_sym((st.c_out, st.c_in, st.k, st.k), a)
        params[f"stage{st.index}.b"] = np.zeros(st.c_out)
    for hl in spec.head:
        a = hl.in_width ** -0.5
        params[f"fc{hl.index}.w"] = rng.uniform_sym((hl.out_width, hl.in_width), a)
        params[f"fc{hl.index}.b"] = np.zeros(hl.out_width)
    return params
