"""Scheduling under L2 pressure.

Three independent conv branches could run on three accelerators at once,
but their outputs do not fit the shared L2 together. The planner then
serializes the branches so at most two of the three conv outputs are ever
live, and the makespan grows as the scratchpad shrinks.
"""

import json

from matcha import (build_problem, enumerate_matches, load_model,
                    load_platform, plan, refine_latencies, simulate, solve,
                    validate_plan)
from matcha.rewrite import apply_assignment
from matcha.sim_exec import render_gantt_text


def model():
    tensors = [{"name": "x", "shape": [1, 8, 8, 8], "dtype": "f32",
                "kind": "input"}]
    operators = []
    for i in "abc":
        tensors += [
            {"name": f"w{i}", "shape": [3, 3, 8, 8], "dtype": "f32",
             "kind": "weight"},
            {"name": f"t{i}", "shape": [1, 8, 8, 8], "dtype": "f32",
             "kind": "intermediate"},
            {"name": f"r{i}", "shape": [1, 8, 8, 8], "dtype": "f32",
             "kind": "output"},
        ]
        operators += [
            {"name": f"conv{i}", "op_type": "conv2d",
             "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1,
                       "stride_w": 1, "pad_t": 1, "pad_b": 1, "pad_l": 1,
                       "pad_r": 1},
             "inputs": ["x", f"w{i}"], "outputs": [f"t{i}"]},
            {"name": f"relu{i}", "op_type": "relu", "attrs": {},
             "inputs": [f"t{i}"], "outputs": [f"r{i}"]},
        ]
    return {"schema": "matcha-model/1", "tensors": tensors,
            "operators": operators}


def platform(l2_bytes):
    return {
        "schema": "matcha-platform/1",
        "devices": [{"name": "host", "alpha": 4, "l1_bytes": 0,
                     "dma_bw_bytes_per_cycle": 0, "is_host": True}] +
                   [{"name": f"d{j}", "alpha": 0.5, "l1_bytes": 65536,
                     "dma_bw_bytes_per_cycle": 16, "is_host": False}
                    for j in (1, 2, 3)],
        "memory": {"l2_bytes": l2_bytes, "l3_bytes": 64 * l2_bytes,
                   "l2_l3_bw_bytes_per_cycle": 16},
        "dispatch_overhead_cycles": 0,
        "helper_cost_per_byte": 0.25,
        "patterns": [{"name": f"p{j}", "device": f"d{j}", "ops": ["conv2d"],
                      "eta": 1} for j in (1, 2, 3)],
    }


def run(l2_bytes):
    g = load_model(json.dumps(model()))
    plat = load_platform(json.dumps(platform(l2_bytes)))
    problem = build_problem(g, enumerate_matches(g, plat), plat, 1)
    a = solve(problem, mode="exact")
    tg = apply_assignment(g, a, problem)
    p = plan(tg, refine_latencies(tg, plat), plat)
    assert validate_plan(p, tg, plat)["pass"]
    return plat, p


def main():
    for l2 in (1 << 22, 13 * 1024):
        plat, p = run(l2)
        tl = simulate(p, plat)
        print(f"\nL2 = {l2} bytes -> makespan {float(tl.makespan_cycles):.0f} "
              "cycles")
        print(render_gantt_text(tl))
        convs = {}
        for a in p.allocations:
            if a.level == "L2" and a.tensor in ("ta", "tb", "tc"):
                convs[a.tensor] = (float(a.start), float(a.end))
        print("conv output lifetimes:", convs)


if __name__ == "__main__":
    main()
