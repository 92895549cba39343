"""Load a small residual model and a two-accelerator platform, then list
every pattern match the catalogue admits.

A match is an embedding of a pattern chain into the graph. Fused chains
are only legal when the connecting tensor has a single consumer, so the
branchy part of this model limits what can fuse.
"""

import json

from matcha import enumerate_matches, load_model, load_platform, matches_covering

MODEL = {
    "schema": "matcha-model/1",
    "tensors": [
        {"name": "x", "shape": [1, 16, 16, 8], "dtype": "f32", "kind": "input"},
        {"name": "w1", "shape": [3, 3, 8, 8], "dtype": "f32", "kind": "weight"},
        {"name": "t1", "shape": [1, 16, 16, 8], "dtype": "f32", "kind": "intermediate"},
        {"name": "r1", "shape": [1, 16, 16, 8], "dtype": "f32", "kind": "intermediate"},
        {"name": "w2", "shape": [3, 3, 8, 8], "dtype": "f32", "kind": "weight"},
        {"name": "t2", "shape": [1, 16, 16, 8], "dtype": "f32", "kind": "intermediate"},
        {"name": "y", "shape": [1, 16, 16, 8], "dtype": "f32", "kind": "output"},
    ],
    "operators": [
        {"name": "conv1", "op_type": "conv2d",
         "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                   "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
         "inputs": ["x", "w1"], "outputs": ["t1"]},
        {"name": "relu1", "op_type": "relu", "attrs": {},
         "inputs": ["t1"], "outputs": ["r1"]},
        {"name": "conv2", "op_type": "conv2d",
         "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                   "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1},
         "inputs": ["r1", "w2"], "outputs": ["t2"]},
        # the residual add reads both x and t2, so conv1's output feeds a
        # single consumer (fusable) while x feeds two (not fusable past it)
        {"name": "res_add", "op_type": "add", "attrs": {},
         "inputs": ["t2", "x"], "outputs": ["y"]},
    ],
}

PLATFORM = {
    "schema": "matcha-platform/1",
    "devices": [
        {"name": "host", "alpha": 4, "l1_bytes": 0,
         "dma_bw_bytes_per_cycle": 0, "is_host": True},
        {"name": "cluster", "alpha": 0.25, "l1_bytes": 262144,
         "dma_bw_bytes_per_cycle": 8, "is_host": False},
        {"name": "vector", "alpha": 0.125, "l1_bytes": 131072,
         "dma_bw_bytes_per_cycle": 16, "is_host": False},
    ],
    "memory": {"l2_bytes": 1048576, "l3_bytes": 16777216,
               "l2_l3_bw_bytes_per_cycle": 16},
    "dispatch_overhead_cycles": 200,
    "helper_cost_per_byte": 0.25,
    "patterns": [
        {"name": "cluster_conv", "device": "cluster", "ops": ["conv2d"],
         "eta": 0.7, "delta_cycles": 500},
        {"name": "cluster_conv_relu", "device": "cluster",
         "ops": ["conv2d", "relu"], "eta": 0.7, "delta_cycles": 500},
        {"name": "vector_conv_add", "device": "vector",
         "ops": ["conv2d", "add"], "eta": 0.8, "delta_cycles": 300},
    ],
}


def main():
    g = load_model(json.dumps(MODEL))
    plat = load_platform(json.dumps(PLATFORM))

    print(f"model: {len(g.operators)} operators, "
          f"{sum(op.ops_count for op in g.operators)} arithmetic ops total")
    for op in g.operators:
        print(f"  {op.name:<8} {op.op_type:<9} ops={op.ops_count:<8} "
              f"tile_axis={op.tile_axis} extent={op.tile_extent}")

    matches = enumerate_matches(g, plat)
    print(f"\n{len(matches)} matches (the wildcard guarantees coverage):")
    for m in matches:
        print(f"  #{m.id:<3} {m.pattern:<18} {' -> '.join(m.nodes)}")

    print("\nmatches covering res_add:")
    for m in matches_covering(matches, "res_add"):
        print(f"  #{m.id} {m.pattern} over {m.nodes}")
    print("\nnote: conv1+relu1 fuses (single consumer); conv2+res_add fuses;")
    print("nothing fuses across r1 into conv2 because patterns are chains")
    print("with pointwise tails only.")


if __name__ == "__main__":
    main()
