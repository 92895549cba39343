"""Graph rewriting: instantiate fused supernodes per tile assignment,
split operators into per-match tile bands, and insert slice/concat
helpers with correct convolution halos.

Band layout follows the cost model: a split conv/pool/pointwise operator
reads halo'd row slices (copies) and its partial outputs are reassembled
by explicit concats; a split dense layer slices its weight columns
offline and writes partial outputs at disjoint neuron offsets, so it
needs no runtime helpers at all.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import PlanError
from .model_ir import Graph, TensorInfo, input_rows_for, tile_bounds
from .tile_alloc import TileAssignment, TileProblem


@dataclass(frozen=True)
class InnerOp:
    """One primitive inside a supernode, attrs already band-adjusted."""

    name: str
    op_type: str
    attrs: dict
    inputs: tuple
    output: str
    out_dtype: str


@dataclass(frozen=True)
class SuperNode:
    """A fused kernel restricted to a contiguous tile band."""

    name: str
    match_id: int
    pattern: str
    device: str
    ops: tuple                 # InnerOp chain
    covered: tuple             # original operator names
    tile_range: tuple          # [begin, end) tile indices
    out_tensor: str
    out_range: tuple = None    # (axis, lo, hi) partial write, None = whole

    @property
    def external_inputs(self):
        internal = {op.output for op in self.ops}
        seen, out = set(), []
        for op in self.ops:
            for t in op.inputs:
                if t not in internal and t not in seen:
                    seen.add(t)
                    out.append(t)
        return tuple(out)


@dataclass(frozen=True)
class HelperOp:
    """Host-side slice or concat inserted by the rewrite."""

    name: str
    op_type: str      # "slice" | "concat"
    inputs: tuple
    output: str
    attrs: dict

    @property
    def external_inputs(self):
        return self.inputs


class TiledGraph:
    """The rewritten graph: supernodes plus helpers over an extended
    tensor table, with provenance back to the tile assignment."""

    def __init__(self, tensors, supernodes, helpers, weight_slices,
                 provenance, outputs, base_tiles):
        self.tensors = tensors
        self.supernodes = list(supernodes)
        self.helpers = list(helpers)
        self.weight_slices = weight_slices  # name -> (base, axis, lo, hi)
        self.provenance = provenance
        self.outputs = tuple(outputs)
        self.base_tiles = base_tiles        # op name -> [(match, c0, c1)]
        self.writers = {}
        for n in self.supernodes + self.helpers:
            out = n.out_tensor if isinstance(n, SuperNode) else n.output
            self.writers.setdefault(out, []).append(n.name)
        self.nodes = {n.name: n for n in self.supernodes + self.helpers}
        if len(self.nodes) != len(self.supernodes) + len(self.helpers):
            raise PlanError("duplicate node names in tiled graph")

    def node_output(self, name):
        n = self.nodes[name]
        return n.out_tensor if isinstance(n, SuperNode) else n.output

    def node_inputs(self, name):
        return self.nodes[name].external_inputs

    def topo_nodes(self):
        indeg = {}
        for name in self.nodes:
            indeg[name] = sum(len(self.writers.get(t, ()))
                              for t in set(self.node_inputs(name)))
        ready = sorted(n for n, d in indeg.items() if d == 0)
        order = []
        while ready:
            name = ready.pop(0)
            order.append(name)
            out = self.node_output(name)
            woke = []
            for other in self.nodes:
                if out in self.node_inputs(other):
                    indeg[other] -= 1
                    if indeg[other] == 0:
                        woke.append(other)
            for w in sorted(woke):
                ready.append(w)
        if len(order) != len(self.nodes):
            raise PlanError("cycle in tiled graph")
        return order


def assign_bands(p: TileProblem, assignment):
    """Decompose an assignment into tile-index bands such that every
    fused match covers the same indices on each of its operators.

    Works in rounds: each round finds an exact cover of the operators
    with positive remaining tiles (preferring longer chains, then lower
    match id) and hands every member the next shared contiguous run.
    The exact-cover structure keeps co-split operators aligned, which is
    what lets a partially fused producer feed its sibling bands.
    """
    rem = {mid: t for mid, t in assignment.items() if t > 0}
    need = dict(p.tiles)
    bands = {mid: [] for mid in rem}
    cursor = 0
    order_ops = list(p.graph.topo_order)

    while any(v > 0 for v in need.values()):
        alive = [n for n in order_ops if need[n] > 0]

        def cover(idx, used, chosen):
            if idx == len(alive):
                return list(chosen)
            name = alive[idx]
            if name in used:
                return cover(idx + 1, used, chosen)
            cands = [mid for mid in rem
                     if rem[mid] > 0 and name in p.coeffs[mid].match.covered]
            cands.sort(key=lambda mid: (-len(p.coeffs[mid].match.nodes), mid))
            for mid in cands:
                nodes = p.coeffs[mid].match.nodes
                if any(n in used for n in nodes):
                    continue
                chosen.append(mid)
                got = cover(idx + 1, used | set(nodes), chosen)
                if got is not None:
                    return got
                chosen.pop()
            return None

        chosen = cover(0, frozenset(), [])
        if chosen is None:
            raise PlanError("cannot decompose tile assignment into aligned bands")
        run = min(rem[mid] for mid in chosen)
        for mid in chosen:
            rem[mid] -= run
            for n in p.coeffs[mid].match.nodes:
                need[n] -= run
            if bands[mid] and bands[mid][-1][1] == cursor:
                bands[mid][-1] = (bands[mid][-1][0], cursor + run)
            else:
                bands[mid].append((cursor, cursor + run))
        cursor += run

    if any(v != 0 for v in rem.values()):
        raise PlanError("band decomposition incomplete")
    return {mid: [tuple(b) for b in segs] for mid, segs in bands.items()}


def _axis_index(shape):
    # row axis for NHWC feature maps, innermost axis otherwise
    return 1 if len(shape) == 4 else len(shape) - 1


def _slice_shape(shape, axis, lo, hi):
    out = list(shape)
    out[axis] = hi - lo
    return tuple(out)


class _Rewriter:
    def __init__(self, g: Graph, p: TileProblem, a: TileAssignment):
        self.g = g
        self.p = p
        self.a = a
        self.tensors = dict(g.tensors)
        self.supernodes = []
        self.helpers = []
        self.weight_slices = {}
        self.provenance = {}
        self.per_op = {}     # op -> [(mid, c0, c1)] sorted by band
        self.offline = {}    # op -> bool, partial-write output style
        self.sources = {}    # tensor -> [(lo, hi, src)] materialized regions
        self._slices = {}    # (src, axis, lo, hi) -> tensor name

    def run(self):
        for mid in self.a.assignments:
            if mid not in self.p.coeffs:
                raise PlanError(f"assignment references unknown match {mid}")
        bands = assign_bands(self.p, self.a.assignments)
        for mid, segs in bands.items():
            for c0, c1 in segs:
                for n in self.p.coeffs[mid].match.nodes:
                    self.per_op.setdefault(n, []).append((mid, c0, c1))
        for segs in self.per_op.values():
            segs.sort(key=lambda s: s[1])

        # band style per operator: partial writes only when every band
        # that materializes this output comes from a dense-headed chain
        for name in self.g.topo_order:
            heads = [self.p.coeffs[mid].match.nodes[0]
                     for mid, _, _ in self.per_op[name]
                     if self.p.coeffs[mid].match.nodes[-1] == name]
            self.offline[name] = bool(heads) and all(
                self.g.by_name[h].op_type == "dense" for h in heads)

        # phase 1: plan output materialization (regions, parts, concats)
        for name in self.g.topo_order:
            self._plan_output(name)
        # phase 2: emit supernodes and input slice helpers
        for name in self.g.topo_order:
            for mid, c0, c1 in self.per_op[name]:
                if self.p.coeffs[mid].match.nodes[0] == name:
                    self._emit_segment(mid, c0, c1)

        tg = TiledGraph(self.tensors, self.supernodes, self.helpers,
                        self.weight_slices, self.provenance,
                        self.g.graph_outputs(), dict(self.per_op))
        _check_partitions(self.p, tg)
        return tg

    # -- phase 1: output materialization --------------------------------

    def _rows(self, op, c0, c1):
        T = self.p.tiles[op.name]
        return tile_bounds(op.tile_extent, T, c0), tile_bounds(op.tile_extent, T, c1)

    def _plan_output(self, op_name):
        op = self.g.by_name[op_name]
        out = op.output
        segments = self.per_op[op_name]
        axis = _axis_index(self.tensors[out].shape)
        extent = self.tensors[out].shape[axis]

        if len(segments) == 1:
            mid, _, _ = segments[0]
            if self.p.coeffs[mid].match.nodes[-1] == op_name:
                self.sources[out] = [(0, extent, out, 0)]
            else:
                self.sources[out] = []  # fully fused away, never read
            return

        produced = []
        for mid, c0, c1 in segments:
            match = self.p.coeffs[mid].match
            if match.nodes[-1] != op_name:
                continue  # interior of a fused chain, kept in-kernel
            r0, r1 = self._rows(op, c0, c1)
            if self.offline[op_name]:
                produced.append((r0, r1, out))
            else:
                part = f"{out}__part_{r0}_{r1}"
                self.tensors[part] = TensorInfo(
                    part, _slice_shape(self.tensors[out].shape, axis, r0, r1),
                    self.tensors[out].dtype, "intermediate")
                produced.append((r0, r1, part))
        produced.sort()

        runs, cur = [], None
        for r0, r1, src in produced:
            if cur is not None and r0 == cur[-1][1]:
                cur.append((r0, r1, src))
            else:
                cur = [(r0, r1, src)]
                runs.append(cur)
        # regions carry (lo, hi, src, base): src index 0 maps to
        # original row ``base`` (0 when src is the full output buffer)
        regions = []
        for run in runs:
            lo, hi = run[0][0], run[-1][1]
            srcs = [s for _, _, s in run]
            if all(s == out for s in srcs):
                regions.append((lo, hi, out, 0))
            elif len(srcs) == 1 and not (lo == 0 and hi == extent):
                regions.append((lo, hi, srcs[0], lo))
            else:
                if lo == 0 and hi == extent:
                    dest, base = out, 0
                else:
                    dest, base = f"{out}__rows_{lo}_{hi}", lo
                    self.tensors[dest] = TensorInfo(
                        dest, _slice_shape(self.tensors[out].shape, axis, lo, hi),
                        self.tensors[out].dtype, "intermediate")
                self.helpers.append(HelperOp(
                    name=f"h_concat_{dest}", op_type="concat",
                    inputs=tuple(srcs), output=dest, attrs={"axis": axis}))
                regions.append((lo, hi, dest, base))
        self.sources[out] = regions

    # -- source resolution ----------------------------------------------

    def _slice_of(self, tensor, lo, hi):
        """Tensor providing rows [lo, hi) of ``tensor`` in original
        coordinates, inserting a copy helper when needed."""
        info = self.tensors[tensor]
        axis = _axis_index(info.shape)
        regions = self.sources.get(tensor, [(0, info.shape[axis], tensor, 0)])
        src = None
        for rlo, rhi, name, base in regions:
            if rlo <= lo and hi <= rhi:
                src, slo, shi = name, lo - base, hi - base
                break
        if src is None:
            raise PlanError(f"rows [{lo},{hi}) of '{tensor}' are not materialized")
        sinfo = self.tensors[src]
        if shi - slo == sinfo.shape[axis]:
            return src  # exact region, no copy needed
        key = (src, axis, slo, shi)
        if key in self._slices:
            return self._slices[key]
        name = f"{tensor}__slice{axis}_{lo}_{hi}"
        self.tensors[name] = TensorInfo(
            name, _slice_shape(sinfo.shape, axis, slo, shi), sinfo.dtype,
            "intermediate")
        self.helpers.append(HelperOp(
            name=f"h_{name}", op_type="slice", inputs=(src,), output=name,
            attrs={"axis": axis, "begin": slo, "end": shi}))
        self._slices[key] = name
        return name

    # -- phase 2: supernode emission --------------------------------------

    def _emit_segment(self, mid, c0, c1):
        coeffs = self.p.coeffs[mid]
        match = coeffs.match
        chain = [self.g.by_name[n] for n in match.nodes]
        head = chain[0]
        r0, r1 = self._rows(head, c0, c1)
        solo = len(self.per_op[head.name]) == 1
        full = solo and r0 == 0 and r1 == head.tile_extent

        inner_ops = []
        prev_out = None
        prev_name = None
        for j, op in enumerate(chain):
            inputs = []
            for t in op.inputs:
                if j > 0 and t == prev_name:
                    inputs.append(prev_out)
                    continue
                info = self.tensors[t]
                if full:
                    inputs.append(t)
                elif info.kind == "weight":
                    if op.op_type == "dense":
                        wname = f"{t}__cols_{r0}_{r1}"
                        if wname not in self.tensors:
                            self.tensors[wname] = TensorInfo(
                                wname, _slice_shape(info.shape, 1, r0, r1),
                                info.dtype, "weight")
                            self.weight_slices[wname] = (t, 1, r0, r1)
                        inputs.append(wname)
                    else:
                        inputs.append(t)
                elif j == 0 and op.op_type in ("conv2d", "maxpool2d"):
                    ilo, ihi, _, _ = input_rows_for(op, r0, r1, info.shape[1])
                    inputs.append(self._slice_of(t, ilo, ihi))
                elif op.op_type == "dense":
                    inputs.append(t)  # the input vector is shared
                else:
                    inputs.append(self._slice_of(t, r0, r1))
            attrs = dict(op.attrs)
            if not full and op.op_type == "conv2d":
                in_rows = self.tensors[op.inputs[0]].shape[1]
                _, _, pt, pb = input_rows_for(op, r0, r1, in_rows)
                attrs["pad_t"], attrs["pad_b"] = pt, pb
            temp = f"{op.name}__t{c0}_{c1}"
            inner_ops.append(InnerOp(
                name=f"{op.name}__b{c0}_{c1}", op_type=op.op_type,
                attrs=attrs, inputs=tuple(inputs), output=temp,
                out_dtype=self.tensors[op.output].dtype))
            prev_out, prev_name = temp, op.output

        last = chain[-1]
        out_info = self.tensors[last.output]
        axis = _axis_index(out_info.shape)
        split = len(self.per_op[last.name]) > 1
        if not split:
            out_tensor, out_range = last.output, None
        elif self.offline[last.name]:
            out_tensor, out_range = last.output, (axis, r0, r1)
        else:
            out_tensor, out_range = f"{last.output}__part_{r0}_{r1}", None
        sn_name = f"sn{mid}_{c0}_{c1}"
        self.supernodes.append(SuperNode(
            name=sn_name, match_id=mid, pattern=match.pattern,
            device=coeffs.device, ops=tuple(inner_ops), covered=match.nodes,
            tile_range=(c0, c1), out_tensor=out_tensor, out_range=out_range))
        self.provenance[sn_name] = {
            "match_id": mid, "pattern": match.pattern,
            "nodes": list(match.nodes), "tile_range": [c0, c1],
            "rows": [r0, r1], "device": coeffs.device,
        }


def _check_partitions(p: TileProblem, tg: TiledGraph):
    for name, segs in tg.base_tiles.items():
        covered = sorted((c0, c1) for _, c0, c1 in segs)
        cursor = 0
        for c0, c1 in covered:
            if c0 != cursor:
                raise PlanError(f"tile ranges of '{name}' have a gap or overlap")
            cursor = c1
        if cursor != p.tiles[name]:
            raise PlanError(f"tile ranges of '{name}' do not cover all tiles")


def apply_assignment(g: Graph, a: TileAssignment, p: TileProblem) -> TiledGraph:
    """Rewrite the graph according to a solved tile assignment."""
    for name, mids in p.covering.items():
        got = sum(a.assignments.get(mid, 0) for mid in mids)
        if got != p.tiles[name]:
            raise PlanError(f"conservation mismatch on '{name}'")
    return _Rewriter(g, p, a).run()


def verify_rewrite(original: Graph, tiled: TiledGraph, inputs, weights,
                   rel_tol=1e-5):
    """Run both graphs through the reference interpreter and report the
    element-wise differences per graph output."""
    import numpy as np

    from .sim_exec import interpret

    ref = interpret(original, inputs, weights)
    got = interpret(tiled, inputs, weights)
    report = {"outputs": {}, "pass": True, "rel_tol": rel_tol}
    for name in original.graph_outputs():
        a, b = ref[name], got[name]
        if a.shape != b.shape:
            raise PlanError(f"output '{name}': shape {b.shape} != {a.shape}")
        if a.dtype.kind in "iu":
            exact = bool(np.array_equal(a, b))
            report["outputs"][name] = {
                "bitwise_equal": exact,
                "max_abs": float(np.max(np.abs(a - b), initial=0))}
            report["pass"] = report["pass"] and exact
        else:
            diff = np.abs(a.astype(np.float64) - b.astype(np.float64))
            denom = np.maximum(np.abs(a.astype(np.float64)), 1e-30)
            max_abs = float(diff.max()) if diff.size else 0.0
            max_rel = float((diff / denom).max()) if diff.size else 0.0
            report["outputs"][name] = {"max_abs": max_abs, "max_rel": max_rel}
            report["pass"] = report["pass"] and max_rel <= rel_tol
    return report


def tiledgraph_to_dict(tg: TiledGraph) -> dict:
    return {
        "schema": "matcha-tiledgraph/1",
        "outputs": list(tg.outputs),
        "base_tiles": {op: [[m, c0, c1] for m, c0, c1 in segs]
                       for op, segs in sorted(tg.base_tiles.items())},
        "tensors": [
            {"name": t.name, "shape": list(t.shape), "dtype": t.dtype,
             "kind": t.kind}
            for t in tg.tensors.values()
        ],
        "supernodes": [
            {"name": sn.name, "match_id": sn.match_id, "pattern": sn.pattern,
             "device": sn.device, "covered": list(sn.covered),
             "tile_range": list(sn.tile_range),
             "out_tensor": sn.out_tensor,
             "out_range": list(sn.out_range) if sn.out_range else None,
             "ops": [
                 {"name": o.name, "op_type": o.op_type,
                  "attrs": {k: o.attrs[k] for k in sorted(o.attrs)},
                  "inputs": list(o.inputs), "output": o.output,
                  "out_dtype": o.out_dtype}
                 for o in sn.ops]}
            for sn in tg.supernodes
        ],
        "helpers": [
            {"name": h.name, "op_type": h.op_type, "inputs": list(h.inputs),
             "output": h.output,
             "attrs": {k: h.attrs[k] for k in sorted(h.attrs)}}
            for h in tg.helpers
        ],
        "weight_slices": {k: list(v) for k, v in sorted(tg.weight_slices.items())},
        "provenance": {k: tg.provenance[k] for k in sorted(tg.provenance)},
    }


def tiledgraph_from_dict(doc) -> TiledGraph:
    if doc.get("schema") != "matcha-tiledgraph/1":
        raise PlanError("not a matcha-tiledgraph/1 document")
    tensors = {t["name"]: TensorInfo(t["name"], tuple(t["shape"]), t["dtype"],
                                     t["kind"])
               for t in doc["tensors"]}
    supernodes = []
    for sn in doc["supernodes"]:
        ops = tuple(InnerOp(o["name"], o["op_type"], dict(o["attrs"]),
                            tuple(o["inputs"]), o["output"], o["out_dtype"])
                    for o in sn["ops"])
        supernodes.append(SuperNode(
            name=sn["name"], match_id=sn["match_id"], pattern=sn["pattern"],
            device=sn["device"], ops=ops, covered=tuple(sn["covered"]),
            tile_range=tuple(sn["tile_range"]), out_tensor=sn["out_tensor"],
            out_range=tuple(sn["out_range"]) if sn["out_range"] else None))
    helpers = [HelperOp(h["name"], h["op_type"], tuple(h["inputs"]),
                        h["output"], dict(h["attrs"]))
               for h in doc["helpers"]]
    weight_slices = {k: tuple(v) for k, v in doc["weight_slices"].items()}
    base_tiles = {op: [(m, c0, c1) for m, c0, c1 in segs]
                  for op, segs in doc["base_tiles"].items()}
    return TiledGraph(tensors, supernodes, helpers, weight_slices,
                      dict(doc["provenance"]), tuple(doc["outputs"]),
                      base_tiles)
