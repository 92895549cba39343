"""DNN graph intermediate representation.

The model is a directed acyclic graph whose nodes are tensors and primitive
operators.  Models are ingested from a small JSON schema (``matcha-model/1``),
validated, and annotated with derived quantities: arithmetic-operation counts
per operator and the tiling axis along which each operator may be partitioned
(feature-map rows for convolutions, output neurons for dense layers).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .errors import ModelError

MODEL_SCHEMA = "matcha-model/1"

# f16 is stored and computed with f32 backing throughout the toolkit.
DTYPE_BYTES = {"f32": 4, "f16": 4, "i32": 4, "i8": 1}
TENSOR_KINDS = ("input", "weight", "intermediate", "output")
OP_TYPES = ("conv2d", "dense", "add", "relu", "maxpool2d", "slice", "concat")
ELEMENTWISE_OPS = ("add", "relu")

AXIS_NONE = "none"
AXIS_ROWS = "output_rows"
AXIS_NEURONS = "output_neurons"


@dataclass(frozen=True)
class TensorInfo:
    """Shape/dtype/kind metadata for one named tensor."""

    name: str
    shape: tuple
    dtype: str
    kind: str

    @property
    def size_bytes(self) -> int:
        n = 1
        for e in self.shape:
            n *= e
        return n * DTYPE_BYTES[self.dtype]

    @property
    def elements(self) -> int:
        n = 1
        for e in self.shape:
            n *= e
        return n


@dataclass(frozen=True)
class Operator:
    """A primitive operator node.

    ``ops_count``, ``tile_axis`` and ``tile_extent`` are derived during model
    loading and are never part of the on-disk schema.
    """

    name: str
    op_type: str
    attrs: dict
    inputs: tuple
    outputs: tuple
    ops_count: int = 0
    tile_axis: str = AXIS_NONE
    tile_extent: int = 1

    @property
    def output(self) -> str:
        return self.outputs[0]


class Graph:
    """A validated operator graph with derived producer/consumer maps."""

    def __init__(self, tensors, operators):
        self.tensors = dict(tensors)
        self.operators = list(operators)
        self.by_name = {op.name: op for op in self.operators}
        self.producer = {}   # tensor name -> operator name
        self.consumers = {}  # tensor name -> [operator names]
        for t in self.tensors:
            self.consumers[t] = []
        for op in self.operators:
            for t in op.outputs:
                if t in self.producer:
                    raise ModelError(f"tensor '{t}' has more than one producer")
                self.producer[t] = op.name
            for t in op.inputs:
                self.consumers[t].append(op.name)
        self.topo_order = self._topological_order()
        self.stage = self._stages()

    def _topological_order(self):
        indeg = {}
        for op in self.operators:
            indeg[op.name] = sum(1 for t in op.inputs if t in self.producer)
        order, ready = [], [op.name for op in self.operators if indeg[op.name] == 0]
        ready.sort()
        while ready:
            name = ready.pop(0)
            order.append(name)
            op = self.by_name[name]
            woke = []
            for t in op.outputs:
                for c in self.consumers.get(t, ()):
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        woke.append(c)
            for w in sorted(woke):
                ready.append(w)
        if len(order) != len(self.operators):
            raise ModelError("cycle detected in operator graph")
        return order

    def _stages(self):
        # Longest-path topological leveling; stage 0 holds the sources.
        stage = {}
        for name in self.topo_order:
            op = self.by_name[name]
            preds = [self.producer[t] for t in op.inputs if t in self.producer]
            stage[name] = 1 + max((stage[p] for p in preds), default=-1)
        return stage

    @property
    def edges(self):
        out = []
        for op in self.operators:
            for t in op.outputs:
                for c in self.consumers.get(t, ()):
                    out.append((op.name, c, t))
        return out

    def graph_inputs(self):
        return [t.name for t in self.tensors.values() if t.kind == "input"]

    def graph_outputs(self):
        return [t.name for t in self.tensors.values() if t.kind == "output"]

    def weight_tensors(self):
        return [t.name for t in self.tensors.values() if t.kind == "weight"]


# --- attribute handling ---------------------------------------------------

_ATTR_SPEC = {
    "conv2d": {
        "required": ("kernel_h", "kernel_w", "stride_h", "stride_w"),
        "optional": {"pad_t": 0, "pad_b": 0, "pad_l": 0, "pad_r": 0, "groups": 1},
    },
    "dense": {"required": (), "optional": {}},
    "add": {"required": (), "optional": {}},
    "relu": {"required": (), "optional": {}},
    "maxpool2d": {"required": ("window", "stride"), "optional": {}},
    "slice": {"required": ("axis", "begin", "end"), "optional": {}},
    "concat": {"required": ("axis",), "optional": {}},
}


def _normalize_attrs(op_type, attrs, name):
    spec = _ATTR_SPEC[op_type]
    allowed = set(spec["required"]) | set(spec["optional"])
    for key in attrs:
        if key not in allowed:
            raise ModelError(f"operator '{name}': unknown attribute '{key}' for {op_type}")
    for key in spec["required"]:
        if key not in attrs:
            raise ModelError(f"operator '{name}': missing attribute '{key}' for {op_type}")
    out = dict(spec["optional"])
    out.update(attrs)
    for key, val in out.items():
        if not isinstance(val, int) or val < 0:
            raise ModelError(f"operator '{name}': attribute '{key}' must be a nonnegative integer")
    return out


# --- shape inference and validation ---------------------------------------

def conv2d_out_shape(in_shape, w_shape, attrs):
    if len(in_shape) != 4 or len(w_shape) != 4:
        raise ModelError("conv2d expects NHWC input and HWIO weight")
    n, iy, ix, c = in_shape
    fy, fx, cg, k = w_shape
    g = attrs["groups"]
    if fy != attrs["kernel_h"] or fx != attrs["kernel_w"]:
        raise ModelError("conv2d kernel attrs disagree with weight shape")
    if g < 1 or c % g != 0 or k % g != 0:
        raise ModelError("conv2d groups must divide input and output channels")
    if cg != c // g:
        raise ModelError(f"conv2d input channels {c}/groups {g} != weight channels {cg}")
    oy = (iy + attrs["pad_t"] + attrs["pad_b"] - fy) // attrs["stride_h"] + 1
    ox = (ix + attrs["pad_l"] + attrs["pad_r"] - fx) // attrs["stride_w"] + 1
    if oy < 1 or ox < 1:
        raise ModelError("conv2d output is empty")
    return (n, oy, ox, k)


def maxpool2d_out_shape(in_shape, attrs):
    if len(in_shape) != 4:
        raise ModelError("maxpool2d expects NHWC input")
    n, iy, ix, c = in_shape
    w, s = attrs["window"], attrs["stride"]
    if w < 1 or s < 1 or w > iy or w > ix:
        raise ModelError("maxpool2d window does not fit input")
    return (n, (iy - w) // s + 1, (ix - w) // s + 1, c)


def _infer_out_shape(op_type, attrs, in_shapes, name):
    if op_type == "conv2d":
        if len(in_shapes) != 2:
            raise ModelError(f"operator '{name}': conv2d takes (input, weight)")
        return conv2d_out_shape(in_shapes[0], in_shapes[1], attrs)
    if op_type == "dense":
        if len(in_shapes) != 2:
            raise ModelError(f"operator '{name}': dense takes (input, weight)")
        x, w = in_shapes
        if len(x) != 2 or len(w) != 2 or x[1] != w[0]:
            raise ModelError(f"operator '{name}': dense shapes {x} x {w} do not agree")
        return (x[0], w[1])
    if op_type == "add":
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise ModelError(f"operator '{name}': add operand shapes differ")
        return in_shapes[0]
    if op_type == "relu":
        if len(in_shapes) != 1:
            raise ModelError(f"operator '{name}': relu takes one input")
        return in_shapes[0]
    if op_type == "maxpool2d":
        if len(in_shapes) != 1:
            raise ModelError(f"operator '{name}': maxpool2d takes one input")
        return maxpool2d_out_shape(in_shapes[0], attrs)
    if op_type == "slice":
        (x,) = in_shapes
        ax, b, e = attrs["axis"], attrs["begin"], attrs["end"]
        if ax >= len(x) or not (0 <= b < e <= x[ax]):
            raise ModelError(f"operator '{name}': slice range out of bounds")
        out = list(x)
        out[ax] = e - b
        return tuple(out)
    if op_type == "concat":
        ax = attrs["axis"]
        base = list(in_shapes[0])
        if ax >= len(base):
            raise ModelError(f"operator '{name}': concat axis out of range")
        total = 0
        for s in in_shapes:
            if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != ax):
                raise ModelError(f"operator '{name}': concat operand shapes incompatible")
            total += s[ax]
        base[ax] = total
        return tuple(base)
    raise ModelError(f"operator '{name}': unknown op_type '{op_type}'")


def ops_for(op_type, attrs, in_shapes, out_shape) -> int:
    """Arithmetic operation count from explicit shapes (multiplies and
    adds counted separately, so a MAC contributes 2)."""
    elements = 1
    for e in out_shape:
        elements *= e
    if op_type == "conv2d":
        fy, fx, cg, k = in_shapes[1]
        n, oy, ox, _ = out_shape
        return 2 * k * cg * fy * fx * n * oy * ox
    if op_type == "dense":
        return 2 * in_shapes[0][0] * in_shapes[0][1] * out_shape[1]
    if op_type in ("add", "relu"):
        return elements
    if op_type == "maxpool2d":
        return attrs["window"] * attrs["window"] * elements
    # slice/concat are pure data movement; cost is modeled by the planner
    return 0


def op_count(op, tensors) -> int:
    """Arithmetic operation count of one operator."""
    return ops_for(op.op_type, op.attrs,
                   [tensors[t].shape for t in op.inputs],
                   tensors[op.output].shape)


def _tile_axis_for(op_type, out_shape):
    if op_type in ("conv2d", "maxpool2d"):
        return AXIS_ROWS
    if op_type == "dense":
        return AXIS_NEURONS
    if op_type in ELEMENTWISE_OPS:
        # Pointwise operators tile along whichever axis their shape offers:
        # feature-map rows for NHWC tensors, neurons for flat ones.
        if len(out_shape) == 4:
            return AXIS_ROWS
        if len(out_shape) == 2:
            return AXIS_NEURONS
    return AXIS_NONE


def tile_axis_extent(tile_axis, out_shape) -> int:
    if tile_axis == AXIS_ROWS:
        return out_shape[1]
    if tile_axis == AXIS_NEURONS:
        return out_shape[-1]
    return 1


def tile_count(op, requested_T: int) -> int:
    """Clamp a requested tile count to the operator's tiling axis extent."""
    if requested_T < 1:
        raise ModelError(f"operator '{op.name}': requested tile count must be >= 1")
    if op.tile_axis == AXIS_NONE:
        if requested_T > 1:
            raise ModelError(f"operator '{op.name}' is not tileable")
        return 1
    return min(requested_T, op.tile_extent)


def tile_bounds(extent: int, total: int, index: int) -> int:
    """Row index where tile ``index`` of ``total`` starts (balanced split)."""
    return index * extent // total


# --- halo / receptive field arithmetic ------------------------------------

def input_rows_for(op, out_lo, out_hi, in_rows):
    """Input row range an operator needs to produce output rows
    [out_lo, out_hi), clamped to the physical input, together with the
    implicit top/bottom padding the clamp removed."""
    if op.op_type == "conv2d":
        s, fy, pt = op.attrs["stride_h"], op.attrs["kernel_h"], op.attrs["pad_t"]
    elif op.op_type == "maxpool2d":
        s, fy, pt = op.attrs["stride"], op.attrs["window"], 0
    else:  # elementwise: identity footprint
        return out_lo, out_hi, 0, 0
    need_lo = out_lo * s - pt
    need_hi = (out_hi - 1) * s - pt + fy
    lo = max(0, need_lo)
    hi = min(in_rows, need_hi)
    return lo, hi, lo - need_lo, need_hi - hi


# --- ingestion -------------------------------------------------------------

def graph_from_dict(doc) -> Graph:
    if not isinstance(doc, dict):
        raise ModelError("model document must be a JSON object")
    if doc.get("schema") != MODEL_SCHEMA:
        raise ModelError(f"model document must declare \"schema\": \"{MODEL_SCHEMA}\"")
    tensors = {}
    for entry in doc.get("tensors", []):
        name = entry.get("name")
        if not name or name in tensors:
            raise ModelError(f"bad or duplicate tensor name: {name!r}")
        shape = entry.get("shape")
        if not isinstance(shape, list) or not shape or any(
                not isinstance(e, int) or e < 1 for e in shape):
            raise ModelError(f"tensor '{name}': shape must be nonempty positive extents")
        dtype = entry.get("dtype")
        if dtype not in DTYPE_BYTES:
            raise ModelError(f"tensor '{name}': unknown dtype '{dtype}'")
        kind = entry.get("kind")
        if kind not in TENSOR_KINDS:
            raise ModelError(f"tensor '{name}': unknown kind '{kind}'")
        tensors[name] = TensorInfo(name, tuple(shape), dtype, kind)

    raw_ops = doc.get("operators", [])
    if not raw_ops:
        raise ModelError("empty graph")
    operators = []
    seen = set()
    for entry in raw_ops:
        name = entry.get("name")
        if not name or name in seen:
            raise ModelError(f"bad or duplicate operator name: {name!r}")
        seen.add(name)
        op_type = entry.get("op_type")
        if op_type not in OP_TYPES:
            raise ModelError(f"operator '{name}': unknown op_type '{op_type}'")
        attrs = _normalize_attrs(op_type, entry.get("attrs", {}), name)
        inputs = tuple(entry.get("inputs", ()))
        outputs = tuple(entry.get("outputs", ()))
        if len(outputs) != 1:
            raise ModelError(f"operator '{name}': exactly one output required")
        for t in inputs + outputs:
            if t not in tensors:
                raise ModelError(f"operator '{name}': dangling tensor reference '{t}'")
        in_shapes = [tensors[t].shape for t in inputs]
        expect = _infer_out_shape(op_type, attrs, in_shapes, name)
        got = tensors[outputs[0]].shape
        if expect != got:
            raise ModelError(
                f"operator '{name}': output shape {got} inconsistent, expected {expect}")
        axis = _tile_axis_for(op_type, got)
        operators.append(Operator(
            name=name, op_type=op_type, attrs=attrs, inputs=inputs, outputs=outputs,
            ops_count=0, tile_axis=axis, tile_extent=tile_axis_extent(axis, got)))

    g = Graph(tensors, operators)

    # kind consistency: produced tensors must not be inputs/weights, and
    # intermediates must have a producer.
    for t in g.tensors.values():
        produced = t.name in g.producer
        if t.kind in ("input", "weight") and produced:
            raise ModelError(f"tensor '{t.name}' of kind {t.kind} has a producer")
        if t.kind in ("intermediate", "output") and not produced:
            raise ModelError(f"tensor '{t.name}' of kind {t.kind} has no producer")

    # fill derived ops_count now that all shapes are validated
    ops = [Operator(o.name, o.op_type, o.attrs, o.inputs, o.outputs,
                    op_count(o, g.tensors), o.tile_axis, o.tile_extent)
           for o in g.operators]
    return Graph(g.tensors, ops)


def load_model(text: str) -> Graph:
    """Parse and validate a ``matcha-model/1`` JSON document."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"model parse error: {e}") from e
    return graph_from_dict(doc)


def model_to_dict(g: Graph) -> dict:
    return {
        "schema": MODEL_SCHEMA,
        "tensors": [
            {"name": t.name, "shape": list(t.shape), "dtype": t.dtype, "kind": t.kind}
            for t in g.tensors.values()
        ],
        "operators": [
            {"name": o.name, "op_type": o.op_type,
             "attrs": {k: o.attrs[k] for k in sorted(o.attrs)},
             "inputs": list(o.inputs), "outputs": list(o.outputs)}
            for o in g.operators
        ],
    }


def dumps_model(g: Graph) -> str:
    """Canonical serialization; loading it back is a fixed point."""
    return json.dumps(model_to_dict(g), indent=2, sort_keys=True) + "\n"
