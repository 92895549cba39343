"""Execution scheduling and L2/L3 memory planning.

Deterministic list scheduling over the tiled-graph node DAG (critical-path
priority, one kernel per device, one serialized system DMA) combined with
an online (time x address) allocator for the shared L2 scratchpad.  When a
tensor does not fit, the planner compares delaying the task against
swapping out the live tensor with the furthest next use, and keeps weights
in L3 until their first use (planned loads).  Every wait is recorded as an
explicit task dependency so the simulator can re-derive all start times.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from fractions import Fraction

from .errors import InfeasibleError, PlanError
from .platform import Platform
from .rewrite import SuperNode, TiledGraph

SYS_DMA = "sysdma"


@dataclass
class ScheduledTask:
    id: int
    kind: str        # kernel | dma_l3_to_l2 | dma_l2_to_l3 | dispatch
    category: str    # kernel | helper | dma | dispatch
    label: str       # node name (kernels/dispatch) or tensor name (DMA)
    resource: str
    start: Fraction
    end: Fraction
    depends_on: tuple


@dataclass
class Allocation:
    tensor: str
    level: str       # L2 | L3
    address: int
    size_bytes: int
    start: Fraction
    end: Fraction
    strategy: str    # static_resident | swapped | planned_load


@dataclass
class Plan:
    tasks: list
    allocations: list
    makespan_cycles: Fraction
    per_device_utilization: dict


class _Record:
    __slots__ = ("tensor", "addr", "size", "start", "end", "closer", "strategy")

    def __init__(self, tensor, addr, size, start, strategy):
        self.tensor = tensor
        self.addr = addr
        self.size = size
        self.start = start
        self.end = None       # open until freed
        self.closer = None    # task id whose end frees the block
        self.strategy = strategy


class _Level:
    """First-fit (time x address) allocator for one memory level."""

    def __init__(self, capacity):
        self.capacity = capacity
        self.records = []

    def conflicts(self, t, exclude=()):
        out = []
        for r in self.records:
            if r in exclude:
                continue
            if r.end is None or r.end > t:
                out.append(r)
        return out

    def first_fit(self, size, t, exclude=()):
        if size > self.capacity:
            return None
        busy = sorted(self.conflicts(t, exclude), key=lambda r: r.addr)
        addr = 0
        for r in busy:
            if addr + size <= r.addr:
                return addr
            addr = max(addr, r.addr + r.size)
        if addr + size <= self.capacity:
            return addr
        return None

    def wait_candidates(self, t):
        ends = sorted({r.end for r in self.records
                       if r.end is not None and r.end > t})
        return ends

    def closers_until(self, addr, size, t_from, t):
        deps = []
        for r in self.records:
            if r.end is None or r.closer is None:
                continue
            if t_from < r.end <= t and r.addr < addr + size and addr < r.addr + r.size:
                deps.append(r.closer)
        return deps

    def alloc(self, tensor, size, addr, start, strategy):
        rec = _Record(tensor, addr, size, start, strategy)
        self.records.append(rec)
        return rec


def _node_duration(lat, name):
    d = lat[name]
    return d if isinstance(d, Fraction) else Fraction(d)


class _Planner:
    def __init__(self, tg: TiledGraph, latencies, plat: Platform,
                 order_override=None):
        self.tg = tg
        self.plat = plat
        self.lat = {n: _node_duration(latencies, n) for n in tg.nodes}
        self.order_override = order_override
        self.l2 = _Level(plat.memory.l2_bytes)
        self.l3 = _Level(plat.memory.l3_bytes)
        self.bw = plat.memory.l2_l3_bw_bytes_per_cycle
        self.host = plat.host.name
        self.tasks = []
        self.avail = {d.name: Fraction(0) for d in plat.devices}
        self.avail[SYS_DMA] = Fraction(0)

        self.readers = {}
        for name in tg.nodes:
            for t in set(tg.node_inputs(name)):
                self.readers.setdefault(t, []).append(name)
        self.pinned = {t.name for t in tg.tensors.values()
                       if t.kind in ("input", "output")}
        self.weights = {t.name for t in tg.tensors.values()
                        if t.kind == "weight"}
        # tensor -> {"state": l2|l3|swapped, "rec": _Record, "l3_rec": _Record}
        self.tstate = {}
        self.remaining_readers = {t: len(ns) for t, ns in self.readers.items()}
        self.touched = {}   # tensor -> [task ids] committed tasks touching it
        self.node_task = {}      # node name -> kernel task id
        self.dispatch_task = {}  # node name -> dispatch task id

    # -- helpers ---------------------------------------------------------

    def _new_task(self, kind, category, label, resource, start, end, deps):
        tid = len(self.tasks)
        task = ScheduledTask(tid, kind, category, label, resource,
                             start, end, tuple(sorted(set(deps))))
        self.tasks.append(task)
        self.avail[resource] = max(self.avail[resource], end)
        return task

    def _dma_cycles(self, nbytes):
        return Fraction(-(-nbytes // self.bw))

    def _busy_until(self, tensor):
        return max((self.tasks[t].end for t in self.touched.get(tensor, ())),
                   default=Fraction(0))

    def _priorities(self):
        rank = {}
        order = self.tg.topo_nodes()
        succs = {n: set() for n in self.tg.nodes}
        for name in self.tg.nodes:
            out = self.tg.node_output(name)
            for r in self.readers.get(out, ()):
                succs[name].add(r)
        for name in reversed(order):
            rank[name] = self.lat[name] + max(
                (rank[s] for s in succs[name]), default=Fraction(0))
        return rank

    # -- memory ----------------------------------------------------------

    def _check_fits(self):
        for name in self.tg.nodes:
            node = self.tg.nodes[name]
            tensors = set(self.tg.node_inputs(name))
            tensors.add(self.tg.node_output(name))
            for t in tensors:
                if self.tg.tensors[t].size_bytes > self.l2.capacity:
                    raise InfeasibleError(f"tensor cannot fit L2: '{t}'")

    def _place_weights_l3(self):
        addr = 0
        for t in sorted(self.weights):
            size = self.tg.tensors[t].size_bytes
            if addr + size > self.l3.capacity:
                raise InfeasibleError("weights exceed L3 capacity")
            rec = self.l3.alloc(t, size, addr, Fraction(0), "planned_load")
            addr += size
            self.tstate[t] = {"state": "l3", "l3_rec": rec}

    def _pin_graph_io(self):
        for t in sorted(self.pinned):
            size = self.tg.tensors[t].size_bytes
            addr = self.l2.first_fit(size, Fraction(0))
            if addr is None:
                raise InfeasibleError(
                    f"graph inputs/outputs exceed L2: '{t}' does not fit")
            rec = self.l2.alloc(t, size, addr, Fraction(0), "static_resident")
            self.tstate[t] = {"state": "l2", "rec": rec}

    def _swap_victims(self, need_size, t_need, keep):
        """Victims in furthest-next-use order (approximated by the lowest
        best-priority uncommitted reader), fully written and idle."""
        cands = []
        for r in self.l2.conflicts(t_need):
            if r.end is not None:
                continue  # already scheduled to free; waiting covers it
            t = r.tensor
            if t in keep or t in self.pinned:
                continue
            st = self.tstate.get(t)
            if st is None or st.get("rec") is not r or st["state"] != "l2":
                continue
            writers = self.tg.writers.get(t, [])
            if any(w not in self.node_task for w in writers):
                continue  # not fully written yet
            future = [n for n in self.readers.get(t, ())
                      if n not in self.node_task]
            score = max((self.prio[n] for n in future), default=Fraction(-1))
            cands.append((score, t, r))
        cands.sort(key=lambda x: (x[0], x[1]))
        return cands

    def _commit_swap_out(self, tensor, rec):
        """Evict one L2 tensor; returns the task id whose end frees the
        block.  Weights are dropped without a copy-back since L3 keeps
        the master copy; intermediates move over the system DMA."""
        st = self.tstate[tensor]
        if tensor in self.weights:
            touched = self.touched.get(tensor, ())
            last = max(touched, key=lambda t: (self.tasks[t].end, t))
            rec.end = self.tasks[last].end
            rec.closer = last
            st.update({"state": "l3"})
            return last
        size = rec.size
        start = max(self.avail[SYS_DMA], self._busy_until(tensor))
        end = start + self._dma_cycles(size)
        l3_addr = self.l3.first_fit(size, start)
        if l3_addr is None:
            raise InfeasibleError("swap space exceeds L3 capacity")
        deps = [tid for tid in self.touched.get(tensor, ())]
        task = self._new_task("dma_l2_to_l3", "dma", tensor, SYS_DMA,
                              start, end, deps)
        l3_rec = self.l3.alloc(tensor, size, l3_addr, start, "swapped")
        rec.end = end
        rec.closer = task.id
        rec.strategy = "swapped"
        st.update({"state": "swapped", "l3_rec": l3_rec,
                   "swap_task": task.id})
        self.touched.setdefault(tensor, []).append(task.id)
        return task.id

    def _alloc_l2(self, tensor, t_need, keep, strategy):
        """Allocate an L2 block for ``tensor`` no earlier than ``t_need``.
        Returns (ready_time, record, dep task ids).  Compares waiting for
        scheduled frees against swapping out live tensors and picks the
        earlier option."""
        size = self.tg.tensors[tensor].size_bytes
        addr = self.l2.first_fit(size, t_need)
        if addr is not None:
            rec = self.l2.alloc(tensor, size, addr, t_need, strategy)
            return t_need, rec, []

        # option (a): wait for already-scheduled frees; the true ready
        # time for the found address is the last end among the records
        # overlapping its window, so dependency ends match it exactly
        a_time = a_addr = None
        for t in self.l2.wait_candidates(t_need):
            addr = self.l2.first_fit(size, t)
            if addr is not None:
                a_addr = addr
                a_time = max([t_need] + [
                    r.end for r in self.l2.records
                    if r.end is not None and r.end > t_need
                    and r.addr < addr + size and addr < r.addr + r.size])
                break

        # option (b): swap out victims with the furthest next use
        victims = []
        b_time = None
        cands = self._swap_victims(size, t_need, keep)
        picked = []
        for score, t, r in cands:
            picked.append(r)
            b_candidate = self.l2.first_fit(size, t_need, exclude=picked)
            if b_candidate is not None:
                # swap DMAs serialize; weights just drop (no copy-back)
                est = self.avail[SYS_DMA]
                free_at = t_need
                for rr in picked:
                    if rr.tensor in self.weights:
                        free_at = max(free_at, self._busy_until(rr.tensor))
                    else:
                        est = max(est, self._busy_until(rr.tensor)) \
                            + self._dma_cycles(rr.size)
                        free_at = max(free_at, est)
                b_time = free_at
                victims = list(picked)
                break

        if a_time is None and b_time is None:
            raise InfeasibleError(
                f"cannot allocate {size} bytes of L2 for '{tensor}'")
        if b_time is not None and (a_time is None or b_time < a_time):
            deps = []
            for r in victims:
                deps.append(self._commit_swap_out(r.tensor, r))
            start = max(t_need, max(self.tasks[d].end for d in deps))
            addr = self.l2.first_fit(size, start)
            if addr is None:
                raise PlanError("swap lookahead failed to free space")
            rec = self.l2.alloc(tensor, size, addr, start, strategy)
            return start, rec, deps
        deps = self.l2.closers_until(a_addr, size, t_need, a_time)
        rec = self.l2.alloc(tensor, size, a_addr, a_time, strategy)
        return a_time, rec, deps

    def _ensure_resident(self, tensor, keep):
        """Make ``tensor`` L2-resident; returns (ready time, deps)."""
        st = self.tstate.get(tensor)
        if st is not None and st["state"] == "l2":
            return st["rec"].start, []
        if st is None:
            raise PlanError(f"tensor '{tensor}' used before being produced")
        # planned load (weights) or swap-in, as early as the DMA allows
        strategy = "planned_load" if st["state"] == "l3" else "swapped"
        ready, rec, deps = self._alloc_l2(tensor, self.avail[SYS_DMA],
                                          keep, strategy)
        dma_deps = list(deps)
        if st["state"] == "swapped":
            dma_deps.append(st["swap_task"])
        start = max(ready, self.avail[SYS_DMA],
                    max((self.tasks[d].end for d in dma_deps),
                        default=Fraction(0)))
        end = start + self._dma_cycles(rec.size)
        rec.start = start
        task = self._new_task("dma_l3_to_l2", "dma", tensor, SYS_DMA,
                              start, end, dma_deps)
        st.update({"state": "l2", "rec": rec})
        self.touched.setdefault(tensor, []).append(task.id)
        return end, [task.id]

    def _release_reader(self, tensor, task_id):
        self.touched.setdefault(tensor, []).append(task_id)
        self.remaining_readers[tensor] -= 1
        if self.remaining_readers[tensor] > 0 or tensor in self.pinned:
            return
        st = self.tstate.get(tensor)
        if st is None or st["state"] != "l2":
            return
        rec = st["rec"]
        last = max(self.touched[tensor], key=lambda t: (self.tasks[t].end, t))
        rec.end = self.tasks[last].end
        rec.closer = last

    # -- main loop ---------------------------------------------------------

    def run(self) -> Plan:
        self._check_fits()
        self._place_weights_l3()
        self._pin_graph_io()
        self.prio = self._priorities()
        committed = set()
        pending = set(self.tg.nodes)
        order_pos = {n: i for i, n in enumerate(self.order_override or ())}

        while pending:
            ready = []
            for n in pending:
                writers = [w for t in set(self.tg.node_inputs(n))
                           for w in self.tg.writers.get(t, ())]
                if all(w in committed for w in writers):
                    ready.append(n)
            if not ready:
                raise PlanError("scheduling deadlock: no ready node")
            if self.order_override is not None:
                ready.sort(key=lambda n: order_pos[n])
            else:
                ready.sort(key=lambda n: (-self.prio[n], n))
            name = ready[0]
            self._commit(name)
            committed.add(name)
            pending.remove(name)

        makespan = max((t.end for t in self.tasks), default=Fraction(0))
        allocations = []
        for level_name, level in (("L2", self.l2), ("L3", self.l3)):
            for r in level.records:
                end = r.end if r.end is not None else makespan
                allocations.append(Allocation(
                    r.tensor, level_name, r.addr, r.size, r.start, end,
                    r.strategy))
        busy = {d.name: Fraction(0) for d in self.plat.devices}
        for t in self.tasks:
            if t.resource in busy:
                busy[t.resource] += t.end - t.start
        util = {d: (float(b / makespan) if makespan > 0 else 0.0)
                for d, b in busy.items()}
        return Plan(self.tasks, allocations, makespan, util)

    def _window_free(self, rec, t0, t1):
        for r in self.l2.records:
            if r is rec:
                continue
            if r.addr >= rec.addr + rec.size or rec.addr >= r.addr + r.size:
                continue
            if (r.end is None or r.end > t0) and r.start < t1:
                return False
        return True

    def _commit(self, name):
        node = self.tg.nodes[name]
        device = node.device if isinstance(node, SuperNode) else self.host
        duration = self.lat[name]
        inputs = sorted(set(self.tg.node_inputs(name)))
        out = self.tg.node_output(name)

        deps = []
        for t in inputs:
            for w in self.tg.writers.get(t, ()):
                deps.append(self.node_task[w])
        ready = max((self.tasks[d].end for d in deps), default=Fraction(0))

        keep = set(inputs) | {out}
        for t in inputs:
            r, extra = self._ensure_resident(t, keep)
            ready = max(ready, r)
            deps.extend(extra)

        # output block: sibling partial writers share one open allocation
        # (their writes are range-disjoint, so they may overlap in time)
        st = self.tstate.get(out)
        if st is not None and st["state"] == "l2":
            rec = st["rec"]
            if ready < rec.start:
                if self._window_free(rec, ready, rec.start):
                    rec.start = ready  # block is free earlier: extend it
                else:
                    # rare: the window is busy before the block opens, so
                    # fall in behind the sibling that opened it
                    first = min(self.touched.get(out, ()),
                                key=lambda t: self.tasks[t].start)
                    deps.append(first)
                    ready = max(ready, self.tasks[first].end)
        elif st is not None and st["state"] == "swapped":
            r, extra = self._ensure_resident(out, keep)
            ready = max(ready, r)
            deps.extend(extra)
        else:
            r, rec, extra = self._alloc_l2(out, ready, keep, "static_resident")
            ready = max(ready, r)
            deps.extend(extra)
            self.tstate[out] = {"state": "l2", "rec": rec}

        # dispatch on the host, then the kernel on its device
        d_overhead = Fraction(self.plat.dispatch_overhead_cycles)
        d_start = max(self.avail[self.host], ready)
        dispatch = self._new_task("dispatch", "dispatch", name, self.host,
                                  d_start, d_start + d_overhead, deps)
        self.dispatch_task[name] = dispatch.id
        k_start = max(dispatch.end, self.avail[device])
        category = "kernel" if isinstance(node, SuperNode) else "helper"
        kernel = self._new_task("kernel", category, name, device,
                                k_start, k_start + duration,
                                deps + [dispatch.id])
        self.node_task[name] = kernel.id

        out_rec = self.tstate[out]["rec"]
        out_rec.start = min(out_rec.start, kernel.start)
        self.touched.setdefault(out, []).append(kernel.id)
        if self.remaining_readers.get(out, 0) == 0 and out not in self.pinned:
            out_rec.end = kernel.end
            out_rec.closer = kernel.id
        for t in inputs:
            self._release_reader(t, kernel.id)


def plan(tg: TiledGraph, latencies, plat: Platform, mode="list") -> Plan:
    """Schedule the tiled graph and plan its memory.

    ``list`` is the deterministic critical-path list scheduler.
    ``exhaustive`` tries every topological node order (at most 8 nodes)
    and returns the best plan; it exists as an optimality oracle for tests.
    """
    if mode == "list":
        return _Planner(tg, latencies, plat).run()
    if mode != "exhaustive":
        raise ValueError(f"unknown planning mode '{mode}'")
    names = list(tg.nodes)
    if len(names) > 8:
        raise PlanError("exhaustive planning is limited to 8 nodes")
    best = None
    for perm in itertools.permutations(names):
        try:
            candidate = _Planner(tg, latencies, plat, order_override=perm).run()
        except PlanError:
            continue  # not a topological order
        key = (candidate.makespan_cycles, perm)
        if best is None or key < best[0]:
            best = (key, candidate)
    if best is None:
        raise PlanError("no feasible order found")
    return best[1]


def validate_plan(p: Plan, tg: TiledGraph, plat: Platform):
    """Machine-checkable schedule and memory constraints; returns a
    report with one entry per violated rule."""
    violations = []
    tasks = {t.id: t for t in p.tasks}

    # (1) precedence: declared deps and tensor données flow
    for t in p.tasks:
        for d in t.depends_on:
            if tasks[d].end > t.start:
                violations.append(
                    f"precedence: task {t.id} starts before dep {d} ends")
    kernel_of = {t.label: t for t in p.tasks if t.kind == "kernel"}
    for name in tg.nodes:
        reader = kernel_of.get(name)
        if reader is None:
            violations.append(f"precedence: node '{name}' never scheduled")
            continue
        for tensor in set(tg.node_inputs(name)):
            for w in tg.writers.get(tensor, ()):
                if kernel_of[w].end > reader.start:
                    violations.append(
                        f"precedence: '{name}' starts before writer '{w}' ends")

    # (2) device exclusivity and (3) DMA serialization
    by_resource = {}
    for t in p.tasks:
        by_resource.setdefault(t.resource, []).append(t)
    for res, ts in by_resource.items():
        ts = sorted(ts, key=lambda t: (t.start, t.end))
        for a, b in zip(ts, ts[1:]):
            if a.end > b.start:
                kind = "dma serialization" if res == SYS_DMA else "device exclusivity"
                violations.append(
                    f"{kind}: tasks {a.id} and {b.id} overlap on {res}")

    # (4) 2D packing: capacity and (addr x interval) disjointness
    caps = {"L2": plat.memory.l2_bytes, "L3": plat.memory.l3_bytes}
    for level in ("L2", "L3"):
        allocs = [a for a in p.allocations if a.level == level]
        for a in allocs:
            if a.address + a.size_bytes > caps[level]:
                violations.append(
                    f"capacity: '{a.tensor}' exceeds {level}")
        for a, b in itertools.combinations(allocs, 2):
            addr_overlap = a.address < b.address + b.size_bytes and \
                b.address < a.address + a.size_bytes
            time_overlap = a.start < b.end and b.start < a.end
            if addr_overlap and time_overlap:
                violations.append(
                    f"packing: '{a.tensor}' and '{b.tensor}' overlap in {level}")

    # (5) residency: kernel tensors must be L2-live across the interval
    live = {}
    for a in p.allocations:
        if a.level == "L2":
            live.setdefault(a.tensor, []).append(a)
    for name in tg.nodes:
        k = kernel_of.get(name)
        if k is None:
            continue
        tensors = set(tg.node_inputs(name))
        tensors.add(tg.node_output(name))
        for tensor in tensors:
            spans = live.get(tensor, ())
            if not any(a.start <= k.start and k.end <= a.end for a in spans):
                violations.append(
                    f"residency: '{tensor}' not L2-resident across '{name}'")

    return {"pass": not violations, "violations": violations}


def plan_to_dict(p: Plan) -> dict:
    return {
        "schema": "matcha-plan/1",
        "tasks": [
            {"id": t.id, "kind": t.kind, "category": t.category,
             "label": t.label, "resource": t.resource,
             "start": float(t.start), "end": float(t.end),
             "depends_on": list(t.depends_on)}
            for t in p.tasks
        ],
        "allocations": [
            {"tensor": a.tensor, "level": a.level, "address": a.address,
             "size_bytes": a.size_bytes, "start": float(a.start),
             "end": float(a.end), "strategy": a.strategy}
            for a in p.allocations
        ],
        "makespan_cycles": float(p.makespan_cycles),
        "per_device_utilization": {k: v for k, v in
                                   sorted(p.per_device_utilization.items())},
    }


def plan_from_dict(doc) -> Plan:
    if doc.get("schema") != "matcha-plan/1":
        raise PlanError("not a matcha-plan/1 document")
    tasks = [ScheduledTask(t["id"], t["kind"], t["category"], t["label"],
                           t["resource"], t["start"], t["end"],
                           tuple(t["depends_on"]))
             for t in doc["tasks"]]
    allocations = [Allocation(a["tensor"], a["level"], a["address"],
                              a["size_bytes"], a["start"], a["end"],
                              a["strategy"])
                   for a in doc["allocations"]]
    return Plan(tasks, allocations, doc["makespan_cycles"],
                dict(doc["per_device_utilization"]))
