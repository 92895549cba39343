import random
from fractions import Fraction

import numpy as np
import pytest

from matcha.errors import PlanError
from matcha.model_ir import graph_from_dict
from matcha.sched_mem import Plan, ScheduledTask, plan_from_dict, plan_to_dict
from matcha.sim_exec import (interpret, render_gantt_svg, render_gantt_text,
                             run_end_to_end, simulate, timeline_to_dict)

from genutil import random_model_dict, random_platform_dict


def tiny_platform(n_accels=2, dispatch=0):
    return {
        "schema": "matcha-platform/1",
        "devices": [{"name": "host", "alpha": 4, "l1_bytes": 0,
                     "dma_bw_bytes_per_cycle": 0, "is_host": True}] +
                   [{"name": f"d{i}", "alpha": 0.5, "l1_bytes": 1 << 16,
                     "dma_bw_bytes_per_cycle": 16, "is_host": False}
                    for i in range(1, n_accels + 1)],
        "memory": {"l2_bytes": 1 << 21, "l3_bytes": 1 << 25,
                   "l2_l3_bw_bytes_per_cycle": 16},
        "dispatch_overhead_cycles": dispatch,
        "helper_cost_per_byte": 0.25,
        "patterns": [{"name": f"d{i}_conv", "device": f"d{i}",
                      "ops": ["conv2d"], "eta": 1, "delta_cycles": 0}
                     for i in range(1, n_accels + 1)],
    }


def two_branch_model():
    return {
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, 8, 8, 4], "dtype": "f32", "kind": "input"},
            {"name": "w1", "shape": [3, 3, 4, 4], "dtype": "f32", "kind": "weight"},
            {"name": "w2", "shape": [3, 3, 4, 4], "dtype": "f32", "kind": "weight"},
            {"name": "t1", "shape": [1, 8, 8, 4], "dtype": "f32", "kind": "output"},
            {"name": "t2", "shape": [1, 8, 8, 4], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": "conva", "op_type": "conv2d",
             "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                       "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
             "inputs": ["x", "w1"], "outputs": ["t1"]},
            {"name": "convb", "op_type": "conv2d",
             "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                       "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
             "inputs": ["x", "w2"], "outputs": ["t2"]},
        ],
    }


def test_independent_nodes_overlap_across_devices():
    art = run_end_to_end(two_branch_model(), tiny_platform(2), tiles=1)
    tl = art["timeline"]
    kernels = {}
    for res, spans in tl.intervals.items():
        for label, s, e in spans:
            if label.startswith("sn"):
                kernels[res] = (s, e)
    busy = [v for k, v in kernels.items() if k in ("d1", "d2")]
    assert len(busy) == 2
    (s1, e1), (s2, e2) = busy
    assert s1 < e2 and s2 < e1, "branches did not overlap"
    assert tl.makespan_cycles < (e1 - s1) + (e2 - s2) + max(s1, s2)


def test_single_device_serializes():
    art = run_end_to_end(two_branch_model(), tiny_platform(1), tiles=1)
    tl = art["timeline"]
    spans = [iv for iv in tl.intervals["d1"]]
    assert len(spans) == 2
    spans.sort(key=lambda x: x[1])
    assert spans[0][2] <= spans[1][1]


def test_simulate_flags_divergent_plan():
    art = run_end_to_end(two_branch_model(), tiny_platform(2), tiles=1)
    p = art["plan"]
    doc = plan_to_dict(p)
    doc["tasks"][-1]["start"] += 7.0
    doc["tasks"][-1]["end"] += 7.0
    bad = plan_from_dict(doc)
    with pytest.raises(PlanError, match="diverged"):
        simulate(bad, art["platform"])


def test_simulate_detects_deadlock():
    t0 = ScheduledTask(0, "kernel", "kernel", "a", "d1", Fraction(0),
                       Fraction(1), (1,))
    t1 = ScheduledTask(1, "kernel", "kernel", "b", "d1", Fraction(1),
                       Fraction(2), (0,))
    p = Plan([t0, t1], [], Fraction(2), {})
    from matcha.platform import platform_from_dict
    plat = platform_from_dict(tiny_platform(1))
    with pytest.raises(PlanError, match="deadlock"):
        simulate(p, plat)


def test_breakdown_sums_to_makespan():
    rnd = random.Random(17)
    for _ in range(5):
        model = random_model_dict(rnd, max_ops=4)
        plat = random_platform_dict(rnd, l2_bytes=1 << 21)
        art = run_end_to_end(model, plat, tiles=2, mode="greedy")
        tl = art["timeline"]
        for res, cats in tl.breakdown.items():
            assert sum(cats.values()) == tl.makespan_cycles
        assert all(0.0 <= u <= 1.0 for u in tl.utilization.values())
        assert art["equivalence"]["pass"]


def test_conv_linearity():
    g = graph_from_dict({
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, 6, 6, 3], "dtype": "f32", "kind": "input"},
            {"name": "w", "shape": [3, 3, 3, 4], "dtype": "f32", "kind": "weight"},
            {"name": "y", "shape": [1, 6, 6, 4], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": "conv", "op_type": "conv2d",
             "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                       "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
             "inputs": ["x", "w"], "outputs": ["y"]},
        ],
    })
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (1, 6, 6, 3)).astype(np.float32)
    w = rng.uniform(-1, 1, (3, 3, 3, 4)).astype(np.float32)
    # power-of-two scale: commutes exactly with binary rounding
    y1 = interpret(g, {"x": 2.0 * x}, {"w": w})["y"]
    y2 = 2.0 * interpret(g, {"x": x}, {"w": w})["y"]
    denom = np.maximum(np.abs(y2), 1e-6)
    assert float(np.max(np.abs(y1 - y2) / denom)) <= 1e-6


def test_add_commutativity_bitwise():
    g = graph_from_dict({
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "a", "shape": [1, 4, 4, 2], "dtype": "f32", "kind": "input"},
            {"name": "b", "shape": [1, 4, 4, 2], "dtype": "f32", "kind": "input"},
            {"name": "y", "shape": [1, 4, 4, 2], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": "sum", "op_type": "add", "attrs": {},
             "inputs": ["a", "b"], "outputs": ["y"]},
        ],
    })
    rng = np.random.default_rng(11)
    a = rng.uniform(-1, 1, (1, 4, 4, 2)).astype(np.float32)
    b = rng.uniform(-1, 1, (1, 4, 4, 2)).astype(np.float32)
    y1 = interpret(g, {"a": a, "b": b})["y"]
    y2 = interpret(g, {"a": b, "b": a})["y"]
    assert np.array_equal(y1, y2)


def test_gantt_renders():
    art = run_end_to_end(two_branch_model(), tiny_platform(2), tiles=1)
    txt = render_gantt_text(art["timeline"])
    assert "makespan" in txt and "d1" in txt and "#" in txt
    svg = render_gantt_svg(art["timeline"])
    assert svg.startswith("<svg") and "</svg>" in svg
    doc = timeline_to_dict(art["timeline"])
    assert doc["schema"] == "matcha-timeline/1"


def test_missing_input_reported():
    g = graph_from_dict({
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, 3], "dtype": "f32", "kind": "input"},
            {"name": "y", "shape": [1, 3], "dtype": "f32", "kind": "output"},
        ],
        "operators": [
            {"name": "act", "op_type": "relu", "attrs": {},
             "inputs": ["x"], "outputs": ["y"]},
        ],
    })
    with pytest.raises(Exception, match="missing|shape"):
        interpret(g, {})


def test_slice_concat_model_ops_end_to_end():
    model = {
        "schema": "matcha-model/1",
        "tensors": [
            {"name": "x", "shape": [1, 8, 8, 4], "dtype": "i32", "kind": "input"},
            {"name": "top", "shape": [1, 4, 8, 4], "dtype": "i32",
             "kind": "intermediate"},
            {"name": "bot", "shape": [1, 4, 8, 4], "dtype": "i32",
             "kind": "intermediate"},
            {"name": "tr", "shape": [1, 4, 8, 4], "dtype": "i32",
             "kind": "intermediate"},
            {"name": "y", "shape": [1, 8, 8, 4], "dtype": "i32", "kind": "output"},
        ],
        "operators": [
            {"name": "cut_top", "op_type": "slice",
             "attrs": {"axis": 1, "begin": 0, "end": 4},
             "inputs": ["x"], "outputs": ["top"]},
            {"name": "cut_bot", "op_type": "slice",
             "attrs": {"axis": 1, "begin": 4, "end": 8},
             "inputs": ["x"], "outputs": ["bot"]},
            {"name": "act", "op_type": "relu", "attrs": {},
             "inputs": ["top"], "outputs": ["tr"]},
            {"name": "glue", "op_type": "concat", "attrs": {"axis": 1},
             "inputs": ["tr", "bot"], "outputs": ["y"]},
        ],
    }
    art = run_end_to_end(model, tiny_platform(1), tiles=2)
    assert art["equivalence"]["pass"]
    tl = art["timeline"]
    assert tl.makespan_cycles == art["plan"].makespan_cycles
    # model-level slice/concat run on the host through the wildcard
    host_kernels = [label for label, _, _ in tl.intervals["host"]]
    assert any(label.startswith("sn") for label in host_kernels)


def test_tensor_value_roundtrip():
    from matcha.sim_exec import TensorValue
    arr = np.arange(12, dtype=np.float32).reshape(3, 4)
    tv = TensorValue.from_numpy(arr)
    assert tv.shape == (3, 4) and tv.dtype == "f32"
    assert np.array_equal(tv.to_numpy(), arr)
    with pytest.raises(Exception, match="element count"):
        TensorValue((2, 2), "f32", np.zeros(5))
