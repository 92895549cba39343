"""Deployment planning for DNN inference on multi-accelerator
heterogeneous SoCs.

The pipeline: load a model and a platform description, enumerate pattern
matches, solve the joint tile-allocation problem, rewrite the graph into
per-device supernodes plus helper operators, refine per-node latencies
with an L1 mapper, plan the schedule and L2/L3 memory, then simulate and
functionally verify the result.
"""

__version__ = "0.1.0"

from .errors import (InfeasibleError, MatchaError, ModelError, PlanError,
                     PlatformError)
from .model_ir import Graph, Operator, TensorInfo, dumps_model, load_model
from .pattern_match import Match, enumerate_matches, matches_covering
from .platform import (Device, MemoryHierarchy, Pattern, Platform,
                       load_platform, pattern_supports)
from .tile_alloc import (TileAssignment, TileProblem, build_problem,
                         makespan_model, match_latency, sequential_baseline,
                         solve)
from .rewrite import (SuperNode, TiledGraph, apply_assignment, verify_rewrite)
from .device_map import (LoopNest, MappingCost, refine_latencies,
                         search_mapping)
from .sched_mem import Allocation, Plan, ScheduledTask, plan, validate_plan
from .sim_exec import (TensorValue, Timeline, interpret, run_end_to_end,
                       simulate)
