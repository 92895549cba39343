"""Discrete-event simulation of plans and a functional reference
interpreter for graphs and tiled graphs.

The interpreter is the equivalence oracle for the rewriter: NHWC layout,
accumulation in wide precision (f64 for floats, i64 for integers), then a
cast to the storage dtype.  Splitting along rows or output neurons never
reorders the per-element reduction, so integer results are bitwise stable.
"""

from __future__ import annotations

import numpy as np

from .errors import MatchaError, PlanError
from .model_ir import Graph
from .rewrite import SuperNode, TiledGraph

NP_DTYPE = {"f32": np.float32, "f16": np.float32, "i32": np.int32, "i8": np.int8}


class TensorValue:
    """A named tensor value in canonical (row-major) layout."""

    def __init__(self, shape, dtype, elements):
        self.shape = tuple(shape)
        self.dtype = dtype
        self.elements = np.asarray(elements).reshape(-1)
        if self.elements.size != int(np.prod(self.shape)):
            raise MatchaError("element count does not match shape")

    @classmethod
    def from_numpy(cls, array, dtype=None):
        dtype = dtype or {"float32": "f32", "int32": "i32",
                          "int8": "i8"}.get(array.dtype.name, "f32")
        return cls(array.shape, dtype, array.reshape(-1))

    def to_numpy(self):
        return self.elements.reshape(self.shape).astype(NP_DTYPE[self.dtype])


def _acc_dtype(dtype):
    return np.float64 if dtype in ("f32", "f16") else np.int64


# --- primitive kernels ------------------------------------------------------

def _conv2d(x, w, attrs, out_dtype):
    n, iy, ix, c = x.shape
    fy, fx, cg, k = w.shape
    g = attrs["groups"]
    sy, sx = attrs["stride_h"], attrs["stride_w"]
    pt, pb, pl, pr = attrs["pad_t"], attrs["pad_b"], attrs["pad_l"], attrs["pad_r"]
    acc = _acc_dtype(out_dtype)
    xp = np.zeros((n, iy + pt + pb, ix + pl + pr, c), dtype=acc)
    xp[:, pt:pt + iy, pl:pl + ix, :] = x
    oy = (iy + pt + pb - fy) // sy + 1
    ox = (ix + pl + pr - fx) // sx + 1
    out = np.zeros((n, oy, ox, k), dtype=acc)
    kpg = k // g
    for gi in range(g):
        xs = xp[..., gi * cg:(gi + 1) * cg]
        ws = w[..., gi * kpg:(gi + 1) * kpg].astype(acc)
        for dy in range(fy):
            for dx in range(fx):
                patch = xs[:, dy:dy + sy * oy:sy, dx:dx + sx * ox:sx, :]
                out[..., gi * kpg:(gi + 1) * kpg] += np.einsum(
                    "nyxc,ck->nyxk", patch, ws[dy, dx])
    return out.astype(NP_DTYPE[out_dtype])


def _dense(x, w, out_dtype):
    acc = _acc_dtype(out_dtype)
    return (x.astype(acc) @ w.astype(acc)).astype(NP_DTYPE[out_dtype])


def _maxpool2d(x, attrs):
    win, s = attrs["window"], attrs["stride"]
    n, iy, ix, c = x.shape
    oy, ox = (iy - win) // s + 1, (ix - win) // s + 1
    out = x[:, 0:s * oy:s, 0:s * ox:s, :].copy()
    for dy in range(win):
        for dx in range(win):
            np.maximum(out, x[:, dy:dy + s * oy:s, dx:dx + s * ox:s, :], out=out)
    return out


def apply_op(op_type, attrs, args, out_dtype):
    if op_type == "conv2d":
        return _conv2d(args[0], args[1], attrs, out_dtype)
    if op_type == "dense":
        return _dense(args[0], args[1], out_dtype)
    if op_type == "add":
        acc = _acc_dtype(out_dtype)
        return (args[0].astype(acc) + args[1].astype(acc)).astype(NP_DTYPE[out_dtype])
    if op_type == "relu":
        zero = np.zeros((), dtype=args[0].dtype)
        return np.maximum(args[0], zero)
    if op_type == "maxpool2d":
        return _maxpool2d(args[0], attrs)
    if op_type == "slice":
        ax, b, e = attrs["axis"], attrs["begin"], attrs["end"]
        index = [slice(None)] * args[0].ndim
        index[ax] = slice(b, e)
        return args[0][tuple(index)].copy()
    if op_type == "concat":
        return np.concatenate(args, axis=attrs["axis"])
    raise MatchaError(f"unknown op_type '{op_type}'")


# --- interpreters -----------------------------------------------------------

def _normalize_env(g_tensors, inputs, weights):
    env = {}
    for src in (inputs, weights):
        for name, value in src.items():
            if isinstance(value, TensorValue):
                value = value.to_numpy()
            info = g_tensors[name]
            arr = np.asarray(value, dtype=NP_DTYPE[info.dtype])
            if arr.shape != info.shape:
                raise MatchaError(
                    f"tensor '{name}': got shape {arr.shape}, want {info.shape}")
            env[name] = arr
    return env


def _interpret_graph(g: Graph, inputs, weights):
    env = _normalize_env(g.tensors, inputs, weights)
    for name in g.topo_order:
        op = g.by_name[name]
        missing = [t for t in op.inputs if t not in env]
        if missing:
            raise MatchaError(f"operator '{name}': missing input {missing}")
        args = [env[t] for t in op.inputs]
        env[op.output] = apply_op(
            op.op_type, op.attrs, args, g.tensors[op.output].dtype)
    return {name: env[name] for name in g.graph_outputs()}


def _run_supernode(sn: SuperNode, env, tensors):
    local = {}
    for inner in sn.ops:
        args = [local[t] if t in local else env[t] for t in inner.inputs]
        local[inner.output] = apply_op(inner.op_type, inner.attrs, args,
                                       inner.out_dtype)
    result = local[sn.ops[-1].output]
    if sn.out_range is None:
        env[sn.out_tensor] = result
    else:
        axis, lo, hi = sn.out_range
        dest = env.get(sn.out_tensor)
        if dest is None:
            info = tensors[sn.out_tensor]
            dest = np.zeros(info.shape, dtype=NP_DTYPE[info.dtype])
            env[sn.out_tensor] = dest
        index = [slice(None)] * dest.ndim
        index[axis] = slice(lo, hi)
        dest[tuple(index)] = result


def _interpret_tiled(tg: TiledGraph, inputs, weights):
    env = _normalize_env(tg.tensors, inputs, weights)
    for name, (base, axis, lo, hi) in tg.weight_slices.items():
        index = [slice(None)] * env[base].ndim
        index[axis] = slice(lo, hi)
        env[name] = env[base][tuple(index)].copy()
    for name in tg.topo_nodes():
        node = tg.nodes[name]
        if isinstance(node, SuperNode):
            _run_supernode(node, env, tg.tensors)
        else:
            args = [env[t] for t in node.inputs]
            env[node.output] = apply_op(node.op_type, node.attrs, args,
                                        tg.tensors[node.output].dtype)
    return {name: env[name] for name in tg.outputs}


def interpret(g, inputs, weights=None):
    """Execute a Graph or TiledGraph on named tensor values."""
    weights = weights or {}
    if isinstance(g, TiledGraph):
        return _interpret_tiled(g, inputs, weights)
    return _interpret_graph(g, inputs, weights)


def random_tensor_values(g: Graph, seed=0):
    """Seeded input/weight values for equivalence checks: uniform floats
    for float dtypes, small integers for integral ones (exact in i64)."""
    rng = np.random.default_rng(seed)
    inputs, weights = {}, {}
    for t in g.tensors.values():
        if t.kind not in ("input", "weight"):
            continue
        if t.dtype in ("f32", "f16"):
            data = rng.uniform(-1.0, 1.0, size=t.shape)
        else:
            data = rng.integers(-4, 5, size=t.shape)
        value = data.astype(NP_DTYPE[t.dtype])
        (inputs if t.kind == "input" else weights)[t.name] = value
    return inputs, weights


# --- discrete-event simulation ----------------------------------------------

class Timeline:
    """Per-resource busy intervals with utilization and a cycle breakdown."""

    def __init__(self, intervals, makespan, utilization, breakdown):
        self.intervals = intervals      # resource -> [(label, start, end)]
        self.makespan_cycles = makespan
        self.utilization = utilization  # device -> busy fraction
        self.breakdown = breakdown      # resource -> {category: cycles}


def simulate(plan, plat):
    """Replay a plan event by event: honor dependencies, device
    exclusivity, DMA serialization, and dispatch, re-deriving every start
    time from scratch.  Any divergence from the planned times is an error,
    which is how plan/simulation consistency is enforced."""
    from .sched_mem import SYS_DMA

    tasks = sorted(plan.tasks, key=lambda t: (t.start, t.id))
    by_id = {t.id: t for t in plan.tasks}

    # deadlock check: dependencies must be acyclic
    state = {}

    def visit(tid, stack):
        state[tid] = 1
        stack.append(tid)
        for d in by_id[tid].depends_on:
            if state.get(d) == 1:
                cycle = stack[stack.index(d):] + [d]
                raise PlanError(f"deadlock: circular wait {cycle}")
            if state.get(d) is None:
                visit(d, stack)
        stack.pop()
        state[tid] = 2

    for t in plan.tasks:
        if state.get(t.id) is None:
            visit(t.id, [])

    avail = {}
    derived = {}
    intervals = {}
    for t in tasks:
        start = max((derived[d][1] for d in t.depends_on), default=0)
        start = max(start, avail.get(t.resource, 0))
        # when the derived start agrees, reuse the planned end verbatim:
        # recomputing start + (end - start) can drift by an ulp on float
        # timestamps loaded from JSON
        end = t.end if start == t.start else start + (t.end - t.start)
        derived[t.id] = (start, end)
        avail[t.resource] = end
        if start != t.start or end != t.end:
            raise PlanError(
                f"simulation diverged on task {t.id} ({t.label}): "
                f"planned [{float(t.start)}, {float(t.end)}), "
                f"derived [{float(start)}, {float(end)})")
        intervals.setdefault(t.resource, []).append((t.label, start, end))

    makespan = max((e for _, e in derived.values()), default=0)
    if makespan != plan.makespan_cycles:
        raise PlanError("simulated makespan differs from the plan")

    resources = [d.name for d in plat.devices] + [SYS_DMA]
    breakdown = {}
    utilization = {}
    for res in resources:
        cats = {"kernel": 0, "dma": 0, "helper": 0, "dispatch": 0, "idle": 0}
        busy = 0
        for t in tasks:
            if t.resource != res:
                continue
            cats[t.category] += t.end - t.start
            busy += t.end - t.start
        cats["idle"] = makespan - busy
        breakdown[res] = cats
        if res != SYS_DMA:
            utilization[res] = float(busy / makespan) if makespan else 0.0
        intervals.setdefault(res, [])
    return Timeline(intervals, makespan, utilization, breakdown)


def timeline_to_dict(tl: Timeline) -> dict:
    return {
        "schema": "matcha-timeline/1",
        "makespan_cycles": float(tl.makespan_cycles),
        "utilization": {k: v for k, v in sorted(tl.utilization.items())},
        "breakdown": {
            res: {k: float(v) for k, v in sorted(cats.items())}
            for res, cats in sorted(tl.breakdown.items())
        },
        "resources": {
            res: [[label, float(s), float(e)] for label, s, e in spans]
            for res, spans in sorted(tl.intervals.items())
        },
    }


def render_gantt_text(tl: Timeline, width=72):
    """Fixed-width text art, one row per resource."""
    lines = []
    span = float(tl.makespan_cycles) or 1.0
    names = sorted(tl.intervals)
    label_w = max([len(n) for n in names] + [8])
    lines.append(f"{'resource':<{label_w}} |0{'cycles':>{width - 8}}|")
    for res in names:
        row = [" "] * width
        for label, s, e in tl.intervals[res]:
            a = int(float(s) / span * (width - 1))
            b = max(a + 1, int(float(e) / span * (width - 1)))
            for i in range(a, min(b, width)):
                row[i] = "#" if row[i] == " " else "#"
        lines.append(f"{res:<{label_w}} |{''.join(row)}|")
    lines.append(f"makespan: {float(tl.makespan_cycles):.0f} cycles")
    return "\n".join(lines) + "\n"


def render_gantt_svg(tl: Timeline):
    """Minimal standalone SVG Gantt chart, one lane per resource."""
    names = sorted(tl.intervals)
    span = float(tl.makespan_cycles) or 1.0
    width, lane_h, left = 800.0, 24, 120
    height = lane_h * (len(names) + 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(width + left + 10)}"'
        f' height="{height + 30}" font-family="monospace" font-size="11">']
    for i, res in enumerate(names):
        y = 20 + i * lane_h
        parts.append(f'<text x="4" y="{y + 14}">{res}</text>')
        for label, s, e in tl.intervals[res]:
            x = left + float(s) / span * width
            w = max(1.0, (float(e) - float(s)) / span * width)
            parts.append(
                f'<rect x="{x:.1f}" y="{y + 2}" width="{w:.1f}"'
                f' height="{lane_h - 6}" fill="#4c9f70" stroke="#1d3b2a">'
                f'<title>{label}: {float(s):.0f}..{float(e):.0f}</title></rect>')
    parts.append(
        f'<text x="4" y="{height + 20}">makespan '
        f'{float(tl.makespan_cycles):.0f} cycles</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- pipeline ----------------------------------------------------------------

def run_end_to_end(model_text, platform_text, tiles=16, mode="exact",
                   budget_ms=None, seed=0):
    """Compose the full flow: load, match, solve, rewrite, refine, plan,
    simulate, and check functional equivalence of the rewrite."""
    from .device_map import refine_latencies
    from .model_ir import load_model, graph_from_dict
    from .pattern_match import enumerate_matches
    from .platform import load_platform, platform_from_dict
    from .rewrite import apply_assignment, verify_rewrite
    from .sched_mem import plan as plan_fn
    from .tile_alloc import build_problem, solve

    g = load_model(model_text) if isinstance(model_text, str) \
        else graph_from_dict(model_text)
    plat = load_platform(platform_text) if isinstance(platform_text, str) \
        else platform_from_dict(platform_text)
    matches = enumerate_matches(g, plat)
    problem = build_problem(g, matches, plat, tiles)
    assignment = solve(problem, budget_ms=budget_ms, mode=mode)
    tiled = apply_assignment(g, assignment, problem)
    latencies = refine_latencies(tiled, plat)
    p = plan_fn(tiled, latencies, plat)
    timeline = simulate(p, plat)
    inputs, weights = random_tensor_values(g, seed=seed)
    equivalence = verify_rewrite(g, tiled, inputs, weights)
    return {
        "graph": g, "platform": plat, "matches": matches,
        "problem": problem, "assignment": assignment, "tiled": tiled,
        "latencies": latencies, "plan": p, "timeline": timeline,
        "equivalence": equivalence,
    }
