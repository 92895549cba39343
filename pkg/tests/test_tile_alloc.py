import random
from fractions import Fraction

import pytest

from matcha.errors import PlanError
from matcha.model_ir import graph_from_dict
from matcha.pattern_match import enumerate_matches
from matcha.platform import platform_from_dict
from matcha.tile_alloc import (build_problem, greedy, makespan_model,
                               match_latency, sequential_baseline, solve)

from genutil import enumerate_assignments, random_model, random_platform


def simple_platform(devices, patterns, dispatch=0, helper_cost=0):
    return platform_from_dict({
        "schema": "matcha-platform/1",
        "devices": [{"name": "host", "alpha": devices.get("host", 2),
                     "l1_bytes": 0, "dma_bw_bytes_per_cycle": 0, "is_host": True}] +
                   [{"name": n, "alpha": a, "l1_bytes": 65536,
                     "dma_bw_bytes_per_cycle": 8, "is_host": False}
                    for n, a in devices.items() if n != "host"],
        "memory": {"l2_bytes": 1 << 20, "l3_bytes": 1 << 24,
                   "l2_l3_bw_bytes_per_cycle": 16},
        "dispatch_overhead_cycles": dispatch,
        "helper_cost_per_byte": helper_cost,
        "patterns": patterns,
    })


def dense_graph(in_dim, out_dim, name="fc"):
    return graph_from_dict({
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, in_dim], "dtype": "f32", "kind": "input"},
            {"name": "w", "shape": [in_dim, out_dim], "dtype": "f32", "kind": "weight"},
            {"name": "y", "shape": [1, out_dim], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": name, "op_type": "dense", "attrs": {},
             "inputs": ["x", "w"], "outputs": ["y"]},
        ],
    })


def fused_offload_instance(alpha1=Fraction(1, 2), alpha2=Fraction(1, 2),
                  alphah=Fraction(3, 4), helper_cost=0):
    g = graph_from_dict({
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, 16, 8, 4], "dtype": "f32", "kind": "input"},
            {"name": "w", "shape": [3, 3, 4, 4], "dtype": "f32", "kind": "weight"},
            {"name": "y", "shape": [1, 16, 8, 4], "dtype": "f32", "kind": "intermediate"},
            {"name": "r", "shape": [1, 16, 8, 4], "dtype": "f32", "kind": "input"},
            {"name": "z", "shape": [1, 16, 8, 4], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": "conv", "op_type": "conv2d",
             "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                       "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
             "inputs": ["x", "w"], "outputs": ["y"]},
            {"name": "sum", "op_type": "add", "attrs": {},
             "inputs": ["y", "r"], "outputs": ["z"]},
        ],
    })
    plat = simple_platform(
        {"host": alphah, "dev1": alpha1, "dev2": alpha2},
        [{"name": "d1_conv", "device": "dev1", "ops": ["conv2d"], "eta": 1},
         {"name": "d2_conv_add", "device": "dev2", "ops": ["conv2d", "add"], "eta": 1}],
        helper_cost=helper_cost)
    ms = enumerate_matches(g, plat)
    return g, plat, ms, build_problem(g, ms, plat, 16)


def test_fused_work_per_tile():
    g, plat, ms, p = fused_offload_instance()
    # conv ops 2*(3*3*4*4*16*8) = 36864 over 16 tiles, add 512 over 16
    fused = next(m for m in ms if m.pattern == "d2_conv_add")
    assert p.coeffs[fused.id].work_per_tile == Fraction(36864, 16) + Fraction(512, 16)
    wc_add = next(m for m in ms if m.pattern == "wildcard" and m.nodes == ("sum",))
    assert p.coeffs[wc_add.id].slope == Fraction(512, 16) * Fraction(3, 4)


def test_single_tile_match_work_equals_ops():
    g = dense_graph(100, 10)
    plat = simple_platform({"d": 1}, [{"name": "fc_d", "device": "d",
                                       "ops": ["dense"], "eta": 1}])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 1)
    fc_match = next(m for m in ms if m.pattern == "fc_d")
    assert p.coeffs[fc_match.id].work_per_tile == 2000  # full Ops_v


def test_match_latency_formula():
    # ops = 2*200*160 = 64000, T = 16 => 4000 work per tile
    g = dense_graph(200, 160)
    plat = simple_platform(
        {"d": Fraction(1, 2)},
        [{"name": "fc_d", "device": "d", "ops": ["dense"], "eta": 0.8,
          "delta_cycles": 100}])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 16)
    mid = next(m.id for m in ms if m.pattern == "fc_d")
    assert match_latency(p, mid, 6) == 15100  # 6*4000*0.5/0.8 + 100
    assert match_latency(p, mid, 0) == 0
    with pytest.raises(PlanError):
        match_latency(p, mid, 17)


def test_full_coverage_latency_identity():
    g = dense_graph(200, 160)
    plat = simple_platform({"d": 1}, [{"name": "fc_d", "device": "d",
                                       "ops": ["dense"], "eta": 1}])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 16)
    mid = next(m.id for m in ms if m.pattern == "fc_d")
    assert match_latency(p, mid, 16) == 64000


def test_makespan_balanced_split():
    # slope 2000 per device, zero overheads: 8/8 halves the latency
    g = dense_graph(100, 160)
    plat = simple_platform(
        {"d1": 1, "d2": 1},
        [{"name": "p1", "device": "d1", "ops": ["dense"], "eta": 1},
         {"name": "p2", "device": "d2", "ops": ["dense"], "eta": 1}])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 16)
    m1 = next(m.id for m in ms if m.pattern == "p1")
    m2 = next(m.id for m in ms if m.pattern == "p2")
    assert makespan_model(p, {m1: 8, m2: 8}) == 16000
    assert makespan_model(p, {m1: 16}) == 32000


def test_makespan_checks_conservation():
    g, plat, ms, p = fused_offload_instance()
    with pytest.raises(PlanError, match="conservation"):
        makespan_model(p, {0: 1})


def test_unsplit_has_no_helper_cost():
    g, plat, ms, p = fused_offload_instance(helper_cost=1000)
    fused = next(m.id for m in ms if m.pattern == "d2_conv_add")
    one = makespan_model(p, {fused: 16})
    g0, plat0, ms0, p0 = fused_offload_instance(helper_cost=0)
    assert one == makespan_model(p0, {fused: 16})


def test_helper_cost_keeps_conv_unsplit():
    g, plat, ms, p = fused_offload_instance(helper_cost=1000)
    a = solve(p, mode="exact")
    counts = {}
    for mid, t in a.assignments.items():
        for n in p.coeffs[mid].match.nodes:
            counts[n] = counts.get(n, 0) + 1
    assert counts["conv"] == 1, "solver split the conv despite huge helper cost"


def test_fused_offload_optimum():
    g, plat, ms, p = fused_offload_instance()
    a = solve(p, mode="exact")
    assert a.proof == "optimal"
    assert a.objective_cycles == 7248
    by_pattern = {p.coeffs[mid].match.pattern: t for mid, t in a.assignments.items()
                  if p.coeffs[mid].match.pattern != "wildcard"}
    wc = {p.coeffs[mid].match.nodes[0]: t for mid, t in a.assignments.items()
          if p.coeffs[mid].match.pattern == "wildcard"}
    assert by_pattern == {"d1_conv": 6, "d2_conv_add": 6}
    assert wc == {"conv": 4, "sum": 10}
    brute = min(makespan_model(p, x) for x in enumerate_assignments(p))
    assert a.objective_cycles == brute


def test_two_identical_devices_halve_single_layer():
    g = graph_from_dict({
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, 16, 8, 4], "dtype": "f32", "kind": "input"},
            {"name": "w", "shape": [3, 3, 4, 8], "dtype": "f32", "kind": "weight"},
            {"name": "y", "shape": [1, 16, 8, 8], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": "conv", "op_type": "conv2d",
             "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                       "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
             "inputs": ["x", "w"], "outputs": ["y"]},
        ],
    })
    plat = simple_platform(
        {"host": 100, "d1": 1, "d2": 1},
        [{"name": "p1", "device": "d1", "ops": ["conv2d"], "eta": 1},
         {"name": "p2", "device": "d2", "ops": ["conv2d"], "eta": 1}])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 16)
    a = solve(p, mode="exact")
    single = Fraction(g.by_name["conv"].ops_count)  # alpha=1, eta=1
    assert a.objective_cycles * 2 == single
    assert a.objective_cycles == min(makespan_model(p, x)
                                     for x in enumerate_assignments(p))


def test_exact_matches_enumeration_on_random_instances():
    rnd = random.Random(21)
    done = 0
    while done < 20:
        g = random_model(rnd, max_ops=4)
        plat = random_platform(rnd, helper_cost=rnd.choice([0, 0.25, 4]))
        ms = enumerate_matches(g, plat)
        p = build_problem(g, ms, plat, rnd.choice([2, 4, 8]))
        if len(ms) > 10:
            continue
        a = solve(p, mode="exact")
        assert a.proof == "optimal"
        brute = min(makespan_model(p, x) for x in enumerate_assignments(p))
        assert a.objective_cycles == brute
        done += 1


def test_conservation_on_solver_outputs():
    rnd = random.Random(33)
    for i in range(40):
        g = random_model(rnd, max_ops=5)
        plat = random_platform(rnd)
        ms = enumerate_matches(g, plat)
        p = build_problem(g, ms, plat, rnd.choice([1, 4, 16]))
        a = solve(p, mode="exact" if i % 2 else "greedy",
                  budget_ms=2000)
        for name, mids in p.covering.items():
            got = sum(a.assignments.get(mid, 0) for mid in mids)
            assert got == p.tiles[name]


def test_dominance_chain():
    rnd = random.Random(55)
    for _ in range(15):
        g = random_model(rnd, max_ops=4)
        plat = random_platform(rnd)
        ms = enumerate_matches(g, plat)
        p = build_problem(g, ms, plat, 4)
        exact = solve(p, mode="exact")
        gre = greedy(p)
        seq_cost, _ = sequential_baseline(p)
        assert exact.objective_cycles <= gre.objective_cycles
        assert gre.objective_cycles <= seq_cost


def test_monotonicity_adding_device():
    rnd = random.Random(77)
    for _ in range(10):
        g = random_model(rnd, max_ops=4, lane="conv")
        base_doc = {
            "schema": "matcha-platform/1",
            "devices": [
                {"name": "host", "alpha": 2, "l1_bytes": 0,
                 "dma_bw_bytes_per_cycle": 0, "is_host": True},
                {"name": "acc0", "alpha": 0.5, "l1_bytes": 65536,
                 "dma_bw_bytes_per_cycle": 8, "is_host": False},
            ],
            "memory": {"l2_bytes": 1 << 20, "l3_bytes": 1 << 24,
                       "l2_l3_bw_bytes_per_cycle": 16},
            "dispatch_overhead_cycles": 10,
            "helper_cost_per_byte": 0.25,
            "patterns": [{"name": "a0_conv", "device": "acc0",
                          "ops": ["conv2d"], "eta": 0.8}],
        }
        plat1 = platform_from_dict(base_doc)
        bigger = dict(base_doc)
        bigger["devices"] = base_doc["devices"] + [
            {"name": "acc1", "alpha": 0.5, "l1_bytes": 65536,
             "dma_bw_bytes_per_cycle": 8, "is_host": False}]
        bigger["patterns"] = base_doc["patterns"] + [
            {"name": "a1_conv", "device": "acc1", "ops": ["conv2d"], "eta": 0.8},
            {"name": "a1_relu", "device": "acc1", "ops": ["relu"], "eta": 1.0}]
        plat2 = platform_from_dict(bigger)
        p1 = build_problem(g, enumerate_matches(g, plat1), plat1, 4)
        p2 = build_problem(g, enumerate_matches(g, plat2), plat2, 4)
        o1 = solve(p1, mode="exact").objective_cycles
        o2 = solve(p2, mode="exact").objective_cycles
        assert o2 <= o1


def test_degenerate_single_tile_reduces_to_layer_assignment():
    rnd = random.Random(99)
    for _ in range(10):
        g = random_model(rnd, max_ops=4)
        plat = random_platform(rnd)
        ms = enumerate_matches(g, plat)
        p = build_problem(g, ms, plat, 1)
        a = solve(p, mode="exact")
        assert all(t == 1 for t in a.assignments.values())
        brute = min(makespan_model(p, x) for x in enumerate_assignments(p))
        assert a.objective_cycles == brute


def test_budget_exhaustion_returns_incumbent():
    # a deliberately symmetric instance with a large search space
    tensors = [{"name": "x", "shape": [1, 32, 8, 4], "dtype": "f32",
                "kind": "input"}]
    operators = []
    cur = "x"
    for i in range(8):
        tensors.append({"name": f"w{i}", "shape": [3, 3, 4, 4], "dtype": "f32",
                        "kind": "weight"})
        out = f"t{i}"
        tensors.append({"name": out, "shape": [1, 32, 8, 4], "dtype": "f32",
                        "kind": "intermediate" if i < 7 else "output"})
        operators.append({"name": f"conv{i}", "op_type": "conv2d",
                          "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1,
                                    "stride_w": 1, "pad_t": 1, "pad_b": 1,
                                    "pad_l": 1, "pad_r": 1},
                          "inputs": [cur, f"w{i}"], "outputs": [out]})
        cur = out
    g = graph_from_dict({"schema": "matcha-model/1", "tensors": tensors,
                         "operators": operators})
    plat = simple_platform(
        {"d1": 1, "d2": 1, "d3": 1},
        [{"name": f"p{j}", "device": f"d{j}", "ops": ["conv2d"], "eta": 1}
         for j in (1, 2, 3)])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 32)
    a = solve(p, budget_ms=5, mode="exact")
    assert a.proof == "feasible"
    assert a.gap >= 0
    for name, mids in p.covering.items():
        assert sum(a.assignments.get(mid, 0) for mid in mids) == p.tiles[name]


def test_deterministic_tie_breaking():
    g = dense_graph(100, 160)
    plat = simple_platform(
        {"d1": 1, "d2": 1},
        [{"name": "p1", "device": "d1", "ops": ["dense"], "eta": 1},
         {"name": "p2", "device": "d2", "ops": ["dense"], "eta": 1}])
    ms = enumerate_matches(g, plat)
    p = build_problem(g, ms, plat, 1)
    results = [solve(p, mode="exact").assignments for _ in range(3)]
    assert results[0] == results[1] == results[2]


def test_monotonicity_adding_pattern_only():
    rnd = random.Random(88)
    for _ in range(8):
        g = random_model(rnd, max_ops=4, lane="conv")
        base_doc = {
            "schema": "matcha-platform/1",
            "devices": [
                {"name": "host", "alpha": 2, "l1_bytes": 0,
                 "dma_bw_bytes_per_cycle": 0, "is_host": True},
                {"name": "acc0", "alpha": 0.5, "l1_bytes": 65536,
                 "dma_bw_bytes_per_cycle": 8, "is_host": False},
            ],
            "memory": {"l2_bytes": 1 << 20, "l3_bytes": 1 << 24,
                       "l2_l3_bw_bytes_per_cycle": 16},
            "dispatch_overhead_cycles": 10,
            "helper_cost_per_byte": 0.25,
            "patterns": [{"name": "a0_conv", "device": "acc0",
                          "ops": ["conv2d"], "eta": 0.8}],
        }
        richer = dict(base_doc)
        richer["patterns"] = base_doc["patterns"] + [
            {"name": "a0_conv_relu", "device": "acc0",
             "ops": ["conv2d", "relu"], "eta": 0.8},
            {"name": "a0_add", "device": "acc0", "ops": ["add"], "eta": 1.0}]
        p1 = platform_from_dict(base_doc)
        p2 = platform_from_dict(richer)
        o1 = solve(build_problem(g, enumerate_matches(g, p1), p1, 4),
                   mode="exact").objective_cycles
        o2 = solve(build_problem(g, enumerate_matches(g, p2), p2, 4),
                   mode="exact").objective_cycles
        assert o2 <= o1
