"""Joint pattern-selection / tile-allocation / device-assignment solver.

Each match ``m`` of pattern ``p`` carries an integer variable ``t`` (tiles
assigned to it).  Conservation requires the tiles of every operator to be
covered exactly once across all instantiated matches; the latency of a match
is affine in ``t`` (per-tile work times device speed over efficiency, plus a
fixed invocation overhead).  The objective is a stage-wise makespan: per
topological stage, devices run their matches in parallel, host-side
slice/concat helper time serializes around the stage, and stages sum.

Two solvers are provided: a branch-and-bound search that proves optimality
on small instances, and an always-feasible greedy water-filler used both
standalone and as the exact solver's incumbent.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction

from .errors import PlanError
from .model_ir import (AXIS_NONE, AXIS_ROWS, DTYPE_BYTES, Graph,
                       input_rows_for, tile_bounds, tile_count)
from .pattern_match import Match
from .platform import Platform


@dataclass(frozen=True)
class MatchCoeffs:
    match: Match
    device: str
    work_per_tile: Fraction
    slope: Fraction   # cycles per assigned tile
    fixed: Fraction   # delta + dispatch overhead, paid once when t > 0
    cap: int          # min tile total over covered operators
    stage: int        # stage of the anchor operator


@dataclass(frozen=True)
class TileProblem:
    graph: Graph
    platform: Platform
    matches: tuple
    tiles: dict       # operator name -> T_v
    coeffs: dict      # match id -> MatchCoeffs
    covering: dict    # operator name -> tuple of match ids


@dataclass(frozen=True)
class TileAssignment:
    assignments: dict          # match id -> t
    objective_cycles: Fraction
    per_device_load: dict      # device -> modeled busy cycles
    proof: str                 # "optimal" or "feasible"
    gap: float = 0.0


def resolve_tiles(g: Graph, tile_config):
    """Per-operator tile totals from an int default or a per-op mapping."""
    if isinstance(tile_config, int):
        default, per_op = tile_config, {}
    else:
        per_op = dict(tile_config)
        default = per_op.pop("default", 16)
    tiles = {}
    for op in g.operators:
        want = per_op.get(op.name, default)
        if op.tile_axis == AXIS_NONE:
            want = 1
        tiles[op.name] = tile_count(op, want)
    return tiles


def build_problem(g: Graph, matches, plat: Platform, tile_config=16) -> TileProblem:
    tiles = resolve_tiles(g, tile_config)
    coeffs = {}
    covering = {op.name: [] for op in g.operators}
    for m in matches:
        ts = [tiles[n] for n in m.nodes]
        if len(m.nodes) > 1 and len(set(ts)) != 1:
            # A fused match needs one tile count shared by every member;
            # per-op overrides that break this simply drop the match
            # (wildcard coverage keeps the problem feasible).
            continue
        pattern = plat.pattern(m.pattern)
        wpt = Fraction(0)
        for n in m.nodes:
            op = g.by_name[n]
            wpt += Fraction(op.ops_count, tiles[n])
        dev = plat.device(pattern.device)
        slope = wpt * dev.alpha / pattern.eta
        fixed = Fraction(pattern.delta_cycles + plat.dispatch_overhead_cycles)
        coeffs[m.id] = MatchCoeffs(
            match=m, device=pattern.device, work_per_tile=wpt, slope=slope,
            fixed=fixed, cap=min(ts), stage=g.stage[m.nodes[0]])
        for n in m.nodes:
            covering[n].append(m.id)
    for name, mids in covering.items():
        if not mids:
            raise PlanError(f"operator '{name}' has no covering match")
    return TileProblem(
        graph=g, platform=plat, matches=tuple(matches), tiles=tiles,
        coeffs=coeffs, covering={k: tuple(v) for k, v in covering.items()})


def match_latency(p: TileProblem, match_id: int, t: int) -> Fraction:
    """Modeled cycles of one match given ``t`` assigned tiles."""
    c = p.coeffs[match_id]
    if t < 0 or t > c.cap:
        raise PlanError(f"match {match_id}: t={t} exceeds a covered operator's tile total")
    if t == 0:
        return Fraction(0)
    return c.slope * t + c.fixed


def _op_ranges(p: TileProblem, assignment, op_name):
    """Contiguous tile ranges per instantiated match, canonical id order."""
    ranges = []
    cursor = 0
    for mid in p.covering[op_name]:
        t = assignment.get(mid, 0)
        if t > 0:
            ranges.append((mid, cursor, cursor + t))
            cursor += t
    return ranges


def split_helper_bytes(p: TileProblem, op_name, ranges):
    """(slice bytes, concat bytes) the host pays when an operator's tiles
    are split across matches.  Dense layers pay nothing: their weight
    tiling folds into the offline weight layout and the partial outputs
    land at disjoint offsets."""
    g = p.graph
    op = g.by_name[op_name]
    if op.op_type == "dense" or len(ranges) < 2:
        return 0, 0
    out = g.tensors[op.output]
    T = p.tiles[op_name]
    extent = op.tile_extent
    width = DTYPE_BYTES[out.dtype]
    slice_bytes = 0
    for _, c0, c1 in ranges:
        lo = tile_bounds(extent, T, c0)
        hi = tile_bounds(extent, T, c1)
        for tname in op.inputs:
            tin = g.tensors[tname]
            if tin.kind == "weight":
                continue
            if op.tile_axis == AXIS_ROWS:
                in_rows = tin.shape[1]
                ilo, ihi, _, _ = input_rows_for(op, lo, hi, in_rows)
                per_row = tin.elements // in_rows
                slice_bytes += (ihi - ilo) * per_row * DTYPE_BYTES[tin.dtype]
            else:  # neurons axis: pointwise column bands
                per_col = tin.elements // tin.shape[-1]
                slice_bytes += (hi - lo) * per_col * DTYPE_BYTES[tin.dtype]
    concat_bytes = out.size_bytes
    return slice_bytes, concat_bytes


def makespan_model(p: TileProblem, assignment) -> Fraction:
    """Stage-wise makespan of a conservation-feasible candidate."""
    for name, mids in p.covering.items():
        total = sum(assignment.get(mid, 0) for mid in mids)
        if total != p.tiles[name]:
            raise PlanError(
                f"tile conservation violated for '{name}': {total} != {p.tiles[name]}")
    n_stages = 1 + max(p.graph.stage.values())
    loads = [dict() for _ in range(n_stages)]
    for mid, t in assignment.items():
        if t <= 0:
            continue
        c = p.coeffs[mid]
        loads[c.stage][c.device] = loads[c.stage].get(c.device, Fraction(0)) \
            + match_latency(p, mid, t)
    helper = [Fraction(0)] * n_stages
    hcpb = p.platform.helper_cost_per_byte
    if hcpb > 0:
        for name in p.covering:
            ranges = _op_ranges(p, assignment, name)
            if len(ranges) < 2:
                continue
            sb, cb = split_helper_bytes(p, name, ranges)
            helper[p.graph.stage[name]] += (sb + cb) * hcpb
    total = Fraction(0)
    for s in range(n_stages):
        stage_max = max(loads[s].values(), default=Fraction(0))
        total += stage_max + helper[s]
    return total


def _device_loads(p: TileProblem, assignment):
    loads = {d.name: Fraction(0) for d in p.platform.devices}
    for mid, t in assignment.items():
        if t > 0:
            loads[p.coeffs[mid].device] += match_latency(p, mid, t)
    return loads


def greedy(p: TileProblem) -> TileAssignment:
    """LPT-style water-filling: walk operators in topological order and
    hand out tiles one at a time to the match whose device finishes the
    stage earliest.  The result is compared against the best sequential
    all-or-nothing cover and the better of the two is returned, so the
    greedy answer never loses to the single-best-device baseline."""
    rem = dict(p.tiles)
    t = {mid: 0 for mid in p.coeffs}
    n_stages = 1 + max(p.graph.stage.values())
    loads = [dict() for _ in range(n_stages)]

    def usable(mid):
        c = p.coeffs[mid]
        return min(rem[n] for n in c.match.nodes) > 0

    for name in p.graph.topo_order:
        while rem[name] > 0:
            best = None
            for mid in p.covering[name]:
                if not usable(mid):
                    continue
                c = p.coeffs[mid]
                cur = loads[c.stage].get(c.device, Fraction(0))
                cost = cur + c.slope + (c.fixed if t[mid] == 0 else 0)
                key = (cost, mid)
                if best is None or key < best:
                    best = key
                    pick = mid
            if best is None:
                raise PlanError(f"greedy cannot cover operator '{name}'")
            c = p.coeffs[pick]
            loads[c.stage][c.device] = loads[c.stage].get(c.device, Fraction(0)) \
                + c.slope + (c.fixed if t[pick] == 0 else 0)
            t[pick] += 1
            for n in c.match.nodes:
                rem[n] -= 1
    assignment = {mid: v for mid, v in t.items() if v > 0}
    obj = makespan_model(p, assignment)
    _, seq_cover = sequential_baseline(p)
    seq_obj = makespan_model(p, seq_cover)
    if seq_obj < obj:
        assignment, obj = seq_cover, seq_obj
    return TileAssignment(assignment, obj, _device_loads(p, assignment), "feasible")


def sequential_baseline(p: TileProblem):
    """Best all-or-nothing cover executed one kernel after another: every
    operator's full tile count lands on a single match and latencies sum.
    This is the layer-to-best-device baseline of sequential deployers."""
    order = [n for n in p.graph.topo_order]
    best = [None]

    def rec(idx, covered, cost, chosen):
        if best[0] is not None and cost >= best[0][0]:
            return
        while idx < len(order) and order[idx] in covered:
            idx += 1
        if idx == len(order):
            best[0] = (cost, dict(chosen))
            return
        name = order[idx]
        for mid in p.covering[name]:
            c = p.coeffs[mid]
            if any(n in covered for n in c.match.nodes):
                continue
            if any(p.tiles[n] != c.cap for n in c.match.nodes):
                continue
            chosen[mid] = c.cap
            rec(idx, covered | set(c.match.nodes),
                cost + match_latency(p, mid, c.cap), chosen)
            del chosen[mid]

    rec(0, frozenset(), Fraction(0), {})
    if best[0] is None:
        raise PlanError("no sequential cover exists")
    return best[0]


def _lower_bound(p: TileProblem, order, pos, rem, loads):
    n_stages = len(loads)
    n_dev = len(p.platform.devices)
    unassigned = order[pos:]
    usable = {}
    for name, r in rem.items():
        if r <= 0:
            continue
        mids = [mid for mid in unassigned
                if name in p.coeffs[mid].match.covered
                and min(rem[n] for n in p.coeffs[mid].match.nodes) > 0]
        if not mids:
            return None  # dead branch: operator can no longer be covered
        usable[name] = mids

    # Remaining tiles of an operator cost at least its cheapest per-tile
    # rate, and covering it at all pays at least the cheapest fixed term
    # once.  Chain members occupy distinct stages, so two same-stage
    # operators never share a match and the fixed terms sum safely.
    fixed_work = [Fraction(0)] * n_stages
    flex_work = Fraction(0)
    for name, mids in usable.items():
        share = Fraction(p.graph.by_name[name].ops_count, p.tiles[name])
        rate = min(p.platform.device(p.coeffs[mid].device).alpha
                   / p.platform.pattern(p.coeffs[mid].match.pattern).eta
                   for mid in mids)
        work = rem[name] * share * rate
        stages = {p.coeffs[mid].stage for mid in mids}
        if len(stages) == 1:
            fixed_work[stages.pop()] += work \
                + min(p.coeffs[mid].fixed for mid in mids)
        else:
            flex_work += work

    total_committed = Fraction(0)
    lb = Fraction(0)
    for s in range(n_stages):
        base = max(loads[s].values(), default=Fraction(0))
        ssum = sum(loads[s].values(), Fraction(0))
        total_committed += ssum
        cap = max(1, len({p.coeffs[mid].device for mid in p.coeffs
                          if p.coeffs[mid].stage == s}))
        lb += max(base, (ssum + fixed_work[s]) / cap)
    global_lb = (total_committed + sum(fixed_work, Fraction(0)) + flex_work) / n_dev
    return max(lb, global_lb)


def solve(p: TileProblem, budget_ms=None, mode="exact") -> TileAssignment:
    """Solve the tile allocation problem.

    ``exact`` runs depth-first branch-and-bound over the integer tile
    variables (largest slope first) seeded with the greedy incumbent and
    returns ``proof="optimal"`` when the search completes.  ``greedy``
    returns the water-filling solution directly.  Ties between
    equal-makespan solutions prefer fewer instantiated matches, then the
    lexicographically smallest assignment vector.
    """
    if mode == "greedy":
        return greedy(p)
    if mode != "exact":
        raise ValueError(f"unknown solve mode '{mode}'")

    incumbent = greedy(p)
    order = sorted(p.coeffs, key=lambda mid: (-p.coeffs[mid].slope, mid))
    all_ids = sorted(p.coeffs)
    n_stages = 1 + max(p.graph.stage.values())

    def solution_key(assignment, obj):
        vec = tuple(assignment.get(mid, 0) for mid in all_ids)
        inst = sum(1 for v in vec if v > 0)
        return (obj, inst, vec)

    best_key = [solution_key(incumbent.assignments, incumbent.objective_cycles)]
    root_lb = _lower_bound(p, order, 0, dict(p.tiles),
                           [dict() for _ in range(n_stages)])
    deadline = None if budget_ms is None else time.monotonic() + budget_ms / 1000.0
    timed_out = [False]
    nodes = [0]

    rem = dict(p.tiles)
    t = {mid: 0 for mid in p.coeffs}
    loads = [dict() for _ in range(n_stages)]

    inst = [0]

    def dfs(pos):
        nodes[0] += 1
        if deadline is not None and nodes[0] % 64 == 0 \
                and time.monotonic() > deadline:
            timed_out[0] = True
        if timed_out[0]:
            return
        if pos == len(order):
            if any(r != 0 for r in rem.values()):
                return
            assignment = {mid: v for mid, v in t.items() if v > 0}
            obj = makespan_model(p, assignment)
            key = solution_key(assignment, obj)
            if key < best_key[0]:
                best_key[0] = key
            return
        lb = _lower_bound(p, order, pos, rem, loads)
        if lb is None or lb > best_key[0][0]:
            return
        if lb == best_key[0][0] and inst[0] > best_key[0][1]:
            return  # any completion ties the objective with a worse key
        mid = order[pos]
        c = p.coeffs[mid]
        hi = min(rem[n] for n in c.match.nodes)
        # stay feasible: leave enough capacity for every covered operator
        lo = 0
        for n in c.match.nodes:
            others = sum(min(rem[x] for x in p.coeffs[o].match.nodes)
                         for o in order[pos + 1:]
                         if n in p.coeffs[o].match.covered)
            lo = max(lo, rem[n] - others)
        if lo > hi:
            return
        for val in range(hi, lo - 1, -1):
            if val > 0:
                for n in c.match.nodes:
                    rem[n] -= val
                add = c.slope * val + c.fixed
                loads[c.stage][c.device] = loads[c.stage].get(c.device, Fraction(0)) + add
                t[mid] = val
                inst[0] += 1
            dfs(pos + 1)
            if val > 0:
                for n in c.match.nodes:
                    rem[n] += val
                loads[c.stage][c.device] -= add
                t[mid] = 0
                inst[0] -= 1
            if timed_out[0]:
                return

    dfs(0)

    obj, inst, vec = best_key[0]
    assignment = {mid: v for mid, v in zip(all_ids, vec) if v > 0}
    proof = "feasible" if timed_out[0] else "optimal"
    gap = 0.0
    if timed_out[0] and obj > 0 and root_lb is not None:
        gap = float((obj - min(root_lb, obj)) / obj)
    return TileAssignment(assignment, obj, _device_loads(p, assignment), proof, gap)


def assignment_to_dict(p: TileProblem, a: TileAssignment) -> dict:
    rows = []
    for mid in sorted(a.assignments):
        c = p.coeffs[mid]
        rows.append({
            "id": mid,
            "pattern": c.match.pattern,
            "device": c.device,
            "nodes": list(c.match.nodes),
            "t": a.assignments[mid],
            "latency_cycles": float(match_latency(p, mid, a.assignments[mid])),
        })
    return {
        "schema": "matcha-assignment/1",
        "matches": rows,
        "objective_cycles": float(a.objective_cycles),
        "objective_exact": [a.objective_cycles.numerator, a.objective_cycles.denominator],
        "per_device_load": {d: float(v) for d, v in sorted(a.per_device_load.items())},
        "proof": a.proof,
        "gap": a.gap,
        "tiles": {k: v for k, v in sorted(p.tiles.items())},
    }
