"""Refining a kernel's latency with the L1 loop mapper.

The mapper picks divisor tile sizes and a loop ordering for one
supernode so its working set fits the accelerator's L1 scratchpad,
then charges serialized L2<->L1 DMA time on top of compute. A tensor is
re-fetched whenever a loop it depends on advances, so orderings that keep
the big operand innermost-resident win.
"""

import json
from fractions import Fraction

from matcha import build_problem, enumerate_matches, load_model, load_platform, solve
from matcha.device_map import (map_supernode, transfer_count,
                               _dims_and_operands, _tile_bytes)
from matcha.rewrite import apply_assignment

MODEL = {
    "schema": "matcha-model/1",
    "tensors": [
        {"name": "x", "shape": [1, 16, 16, 16], "dtype": "f32", "kind": "input"},
        {"name": "w", "shape": [3, 3, 16, 32], "dtype": "f32", "kind": "weight"},
        {"name": "y", "shape": [1, 16, 16, 32], "dtype": "f32", "kind": "output"},
    ],
    "operators": [
        {"name": "conv", "op_type": "conv2d",
         "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                   "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
         "inputs": ["x", "w"], "outputs": ["y"]},
    ],
}

PLATFORM = {
    "schema": "matcha-platform/1",
    "devices": [
        {"name": "host", "alpha": 8, "l1_bytes": 0,
         "dma_bw_bytes_per_cycle": 0, "is_host": True},
        {"name": "acc", "alpha": 0.25, "l1_bytes": 8192,
         "dma_bw_bytes_per_cycle": 8, "is_host": False},
    ],
    "memory": {"l2_bytes": 1048576, "l3_bytes": 16777216,
               "l2_l3_bw_bytes_per_cycle": 16},
    "dispatch_overhead_cycles": 0,
    "helper_cost_per_byte": 0.25,
    "patterns": [
        {"name": "acc_conv", "device": "acc", "ops": ["conv2d"], "eta": 0.8,
         "delta_cycles": 100},
    ],
}


def main():
    g = load_model(json.dumps(MODEL))
    plat = load_platform(json.dumps(PLATFORM))
    problem = build_problem(g, enumerate_matches(g, plat), plat, 1)
    a = solve(problem, mode="exact")
    tg = apply_assignment(g, a, problem)
    (sn,) = tg.supernodes
    dev = plat.device("acc")

    nest, cost = map_supernode(sn, dev, Fraction(4, 5), tg.tensors)
    print(f"chosen mapping for {sn.name} (L1 = {dev.l1_bytes} bytes):")
    print(f"  tile sizes : {nest.tile_sizes}")
    print(f"  loop order : {' > '.join(nest.ordering) or '(single tile)'}")
    print(f"  l1 peak    : {cost.l1_peak_bytes} bytes")
    print(f"  compute    : {float(cost.compute_cycles):.0f} cycles")
    print(f"  dma        : {cost.dma_cycles} cycles (serialized)")
    print(f"  total      : {float(cost.total_cycles):.0f} cycles")

    # compare against a deliberately bad ordering of the same tiling
    dims, operands = _dims_and_operands(sn, tg.tensors)
    outer = {d: e // nest.tile_sizes[d] for d, e in dims}
    worst = None
    import itertools
    active = [d for d in outer if outer[d] > 1]
    for perm in itertools.permutations(active):
        total = sum(transfer_count(perm, outer, op.relevant)
                    * _tile_bytes(op, nest.tile_sizes) for op in operands)
        if worst is None or total > worst[0]:
            worst = (total, perm)
    dma_worst = -(-worst[0] // dev.dma_bw_bytes_per_cycle)
    print(f"\nworst ordering of the same tiling: {' > '.join(worst[1])}")
    print(f"  dma {dma_worst} cycles vs {cost.dma_cycles} for the best order")


if __name__ == "__main__":
    main()
