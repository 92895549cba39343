"""Per-node latency refinement: a bounded exhaustive search over L1 loop
tilings and orderings with an analytic L2<->L1 transfer model.

The mapper enumerates divisor tile sizes per loop dimension and every
ordering of the loops that actually iterate, then scores each candidate
with compute time plus serialized DMA time.  A tensor's tile is
re-fetched whenever any loop it depends on advances (or wraps under an
outer loop), so the transfer count per operand has the closed form

    1 + sum_i [loop i moves the operand] * (e_i - 1) * prod_{k<i} e_k

which equals the fetch count a literal replay of the nest observes with
one resident tile per operand.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

from .errors import InfeasibleError
from .model_ir import DTYPE_BYTES, ops_for
from .platform import Device, Platform
from .rewrite import SuperNode, TiledGraph

MAX_TILE_CANDIDATES = 64


@dataclass(frozen=True)
class LoopNest:
    loops: tuple        # (dim name, outer trip count), outer -> inner
    tile_sizes: dict    # dim name -> inner tile extent
    ordering: tuple     # dim names, outer -> inner (loops that iterate)


@dataclass(frozen=True)
class MappingCost:
    compute_cycles: Fraction
    dma_cycles: int
    total_cycles: Fraction
    l1_peak_bytes: int


@dataclass(frozen=True)
class Operand:
    name: str
    relevant: frozenset   # dim names whose index selects this tile
    footprint: tuple      # see _tile_bytes


def _divisors(n):
    out = [d for d in range(1, n + 1) if n % d == 0]
    return out[:MAX_TILE_CANDIDATES]


def _chain_shapes(sn: SuperNode, tensors):
    """Input/output shapes of every inner op, resolving internal temps."""
    local = {}
    shapes = []
    for op in sn.ops:
        ins = [local[t] if t in local else tensors[t].shape for t in op.inputs]
        from .model_ir import _infer_out_shape
        out = _infer_out_shape(op.op_type, op.attrs, ins, op.name)
        local[op.output] = out
        shapes.append((ins, out))
    return shapes


def band_ops(sn: SuperNode, tensors) -> int:
    """Exact arithmetic work of the supernode's band."""
    total = 0
    for op, (ins, out) in zip(sn.ops, _chain_shapes(sn, tensors)):
        total += ops_for(op.op_type, op.attrs, ins, out)
    return total


def _dims_and_operands(sn: SuperNode, tensors):
    """Loop dimensions and the operands moving through L1 for the head
    op plus any pointwise tail inputs."""
    shapes = _chain_shapes(sn, tensors)
    head = sn.ops[0]
    ins, out = shapes[0]
    width = {t: DTYPE_BYTES[tensors[t].dtype] for t in tensors}

    def w_of(name, fallback=4):
        return width.get(name, fallback)

    operands = []
    if head.op_type == "conv2d":
        n, oy, ox, k = out
        fy, fx, cg, _ = ins[1]
        iy, ix = ins[0][1], ins[0][2]
        sh, sw = head.attrs["stride_h"], head.attrs["stride_w"]
        dims = [("K", k), ("C", cg), ("OY", oy), ("OX", ox), ("FY", fy), ("FX", fx)]
        wi = w_of(head.inputs[0])
        operands.append(Operand("I", frozenset({"C", "OY", "OX", "FY", "FX"}),
                                ("conv_in", n, sh, sw, iy, ix, wi)))
        operands.append(Operand("W", frozenset({"K", "C", "FY", "FX"}),
                                ("prod", ("FY", "FX", "C", "K"), w_of(head.inputs[1]))))
        operands.append(Operand("O", frozenset({"K", "OY", "OX"}),
                                ("prod_n", n, ("OY", "OX", "K"), w_of(sn.out_tensor))))
        tail_rel = frozenset({"K", "OY", "OX"})
        tail_dims = ("OY", "OX", "K")
    elif head.op_type == "dense":
        n = out[0]
        dims = [("OUT", out[1]), ("IN", ins[0][1])]
        operands.append(Operand("I", frozenset({"IN"}),
                                ("prod_n", n, ("IN",), w_of(head.inputs[0]))))
        operands.append(Operand("W", frozenset({"IN", "OUT"}),
                                ("prod", ("IN", "OUT"), w_of(head.inputs[1]))))
        operands.append(Operand("O", frozenset({"OUT"}),
                                ("prod_n", n, ("OUT",), w_of(sn.out_tensor))))
        tail_rel = frozenset({"OUT"})
        tail_dims = ("OUT",)
    elif head.op_type == "maxpool2d":
        n, oy, ox, k = out
        win, s = head.attrs["window"], head.attrs["stride"]
        iy, ix = ins[0][1], ins[0][2]
        dims = [("K", k), ("OY", oy), ("OX", ox)]
        operands.append(Operand("I", frozenset({"K", "OY", "OX"}),
                                ("pool_in", n, win, s, iy, ix, w_of(head.inputs[0]))))
        operands.append(Operand("O", frozenset({"K", "OY", "OX"}),
                                ("prod_n", n, ("OY", "OX", "K"), w_of(sn.out_tensor))))
        tail_rel = frozenset({"K", "OY", "OX"})
        tail_dims = ("OY", "OX", "K")
    else:  # pointwise head
        if len(out) == 4:
            n, oy, ox, k = out
            dims = [("K", k), ("OY", oy), ("OX", ox)]
            rel = frozenset({"K", "OY", "OX"})
            foot = ("prod_n", n, ("OY", "OX", "K"))
        else:
            n = out[0]
            dims = [("OUT", out[-1])]
            rel = frozenset({"OUT"})
            foot = ("prod_n", n, ("OUT",))
        for i, t in enumerate(head.inputs):
            operands.append(Operand(f"I{i}", rel, foot + (w_of(t),)))
        operands.append(Operand("O", rel, foot + (w_of(sn.out_tensor),)))
        tail_rel = rel
        tail_dims = foot[2]

    internal = {op.output for op in sn.ops}
    for j, op in enumerate(sn.ops[1:], start=1):
        for t in op.inputs:
            if t in internal:
                continue
            operands.append(Operand(f"T{j}_{t}", tail_rel,
                                    ("prod_n", shapes[j][1][0], tail_dims, w_of(t))))
    return dims, operands


def _tile_bytes(op: Operand, tiles):
    kind = op.footprint[0]
    if kind == "conv_in":
        _, n, sh, sw, iy, ix, w = op.footprint
        rows = min((tiles["OY"] - 1) * sh + tiles["FY"], iy)
        cols = min((tiles["OX"] - 1) * sw + tiles["FX"], ix)
        return n * rows * cols * tiles["C"] * w
    if kind == "pool_in":
        _, n, win, s, iy, ix, w = op.footprint
        rows = min((tiles["OY"] - 1) * s + win, iy)
        cols = min((tiles["OX"] - 1) * s + win, ix)
        return n * rows * cols * tiles["K"] * w
    if kind == "prod":
        _, names, w = op.footprint
        b = w
        for d in names:
            b *= tiles[d]
        return b
    _, n, names, w = op.footprint
    b = n * w
    for d in names:
        b *= tiles[d]
    return b


def transfer_count(ordering, extents, relevant):
    """Closed-form fetch count for one operand under single-tile
    residency; equals the change count of the index projection."""
    count = 1
    prefix = 1
    n = len(ordering)
    for i, dim in enumerate(ordering):
        e = extents[dim]
        inner_moves = any(ordering[j] in relevant and extents[ordering[j]] > 1
                          for j in range(i + 1, n))
        if dim in relevant or inner_moves:
            count += (e - 1) * prefix
        prefix *= e
    return count


def _ceil_div(a, b):
    return -(-a // b)


def search_mapping(node: SuperNode, dev: Device, plat: Platform, tensors):
    """Best (LoopNest, MappingCost) over divisor tile sizes and loop
    orderings; compute and DMA serialize."""
    return map_supernode(node, dev, plat.pattern(node.pattern).eta, tensors)


_MAP_CACHE = {}


def map_supernode(node: SuperNode, dev: Device, eta: Fraction, tensors):
    work = band_ops(node, tensors)
    compute = Fraction(work) * dev.alpha / eta
    if dev.l1_bytes == 0:
        # the host works straight out of L2
        return (LoopNest((), {}, ()),
                MappingCost(compute, 0, compute, 0))
    cache_key = (_node_signature(node, tensors), dev.alpha, dev.l1_bytes,
                 dev.dma_bw_bytes_per_cycle, eta)
    hit = _MAP_CACHE.get(cache_key)
    if hit is not None:
        return hit
    dims, operands = _dims_and_operands(node, tensors)
    names = [d for d, _ in dims]
    extents_full = {d: e for d, e in dims}
    choices = [_divisors(e) for _, e in dims]
    best = None
    for combo in itertools.product(*choices):
        tiles = dict(zip(names, combo))
        peak = sum(_tile_bytes(op, tiles) for op in operands)
        if peak > dev.l1_bytes:
            continue
        outer = {d: extents_full[d] // tiles[d] for d in names}
        active = [d for d in names if outer[d] > 1]
        tile_sz = {op.name: _tile_bytes(op, tiles) for op in operands}
        if best is not None:
            # every operand moves at least once regardless of ordering
            floor_dma = _ceil_div(sum(tile_sz.values()),
                                  dev.dma_bw_bytes_per_cycle)
            if compute + floor_dma > best[0][0]:
                continue
        orderings = itertools.permutations(active) if active else [()]
        for perm in orderings:
            total_bytes = 0
            for op in operands:
                total_bytes += transfer_count(perm, outer, op.relevant) \
                    * tile_sz[op.name]
            dma = _ceil_div(total_bytes, dev.dma_bw_bytes_per_cycle)
            total = compute + dma
            # ties prefer the largest tiles (fewest invocations), then a
            # canonical loop order
            key = (total, tuple(-t for t in combo), perm)
            if best is None or key < best[0]:
                nest = LoopNest(tuple((d, outer[d]) for d in perm),
                                dict(tiles), tuple(perm))
                best = (key, nest, MappingCost(compute, dma, total, peak))
    if best is None:
        raise InfeasibleError(
            f"operator exceeds L1 at minimum tile: {node.name} on {dev.name}")
    result = (best[1], best[2])
    _MAP_CACHE[cache_key] = result
    return result


def refine_latencies(tg: TiledGraph, plat: Platform):
    """Per-node cycles: mapped kernel time for supernodes (invocation
    overhead plus compute plus serialized DMA), byte cost for helpers."""
    out = {}
    cache = {}
    for sn in tg.supernodes:
        dev = plat.device(sn.device)
        pattern = plat.pattern(sn.pattern)
        if band_ops(sn, tg.tensors) == 0:
            # pure data movement (model-level slice/concat on the host)
            moved = tg.tensors[sn.out_tensor].size_bytes
            out[sn.name] = Fraction(pattern.delta_cycles) \
                + moved * plat.helper_cost_per_byte
            continue
        sig = _node_signature(sn, tg.tensors)
        if sig in cache:
            cost = cache[sig]
        else:
            _, cost = map_supernode(sn, dev, pattern.eta, tg.tensors)
            cache[sig] = cost
        out[sn.name] = Fraction(pattern.delta_cycles) + cost.total_cycles
    for h in tg.helpers:
        moved = tg.tensors[h.output].size_bytes
        out[h.name] = moved * plat.helper_cost_per_byte
    return out


def _node_signature(sn: SuperNode, tensors):
    parts = [sn.pattern, sn.device]
    for op, (ins, outs) in zip(sn.ops, _chain_shapes(sn, tensors)):
        parts.append((op.op_type, tuple(sorted(op.attrs.items())),
                      tuple(map(tuple, ins)), tuple(outs)))
    return tuple(parts)


def mapping_report(tg: TiledGraph, plat: Platform):
    """LoopNest and MappingCost per supernode (the `map` artifact)."""
    rows = []
    for sn in tg.supernodes:
        dev = plat.device(sn.device)
        pattern = plat.pattern(sn.pattern)
        nest, cost = map_supernode(sn, dev, pattern.eta, tg.tensors)
        rows.append({
            "supernode": sn.name,
            "device": sn.device,
            "tile_sizes": {k: v for k, v in sorted(nest.tile_sizes.items())},
            "ordering": list(nest.ordering),
            "loops": [[d, e] for d, e in nest.loops],
            "compute_cycles": float(cost.compute_cycles),
            "dma_cycles": cost.dma_cycles,
            "total_cycles": float(cost.total_cycles),
            "l1_peak_bytes": cost.l1_peak_bytes,
        })
    return {"schema": "matcha-mapping/1", "mappings": rows}
