"""Command-line entry point: compile, simulate, verify, and the
match/map/rewrite debugging dumps, with stable file contracts.

All artifacts are deterministic for fixed (inputs, seed, version): JSON is
emitted with sorted keys and every document carries its schema name and
the tool version.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__
from .device_map import mapping_report, refine_latencies
from .errors import InfeasibleError, MatchaError
from .model_ir import load_model
from .pattern_match import enumerate_matches
from .platform import load_platform
from .rewrite import (apply_assignment, tiledgraph_from_dict,
                      tiledgraph_to_dict, verify_rewrite)
from .sched_mem import plan, plan_from_dict, plan_to_dict, validate_plan
from .sim_exec import (random_tensor_values, render_gantt_svg,
                       render_gantt_text, simulate, timeline_to_dict)
from .tile_alloc import assignment_to_dict, build_problem, solve

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_BUDGET = 4


def _write_json(path, doc):
    doc = dict(doc)
    doc["tool_version"] = __version__
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_text(path):
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as e:
        raise MatchaError(f"cannot read '{path}': {e}") from e


def _load_inputs(args):
    g = load_model(_read_text(args.model))
    plat = load_platform(_read_text(args.platform))
    return g, plat


def _front_half(args):
    g, plat = _load_inputs(args)
    matches = enumerate_matches(g, plat)
    problem = build_problem(g, matches, plat, args.tiles)
    return g, plat, matches, problem


def cmd_compile(args):
    g, plat, matches, problem = _front_half(args)
    assignment = solve(problem, budget_ms=args.budget_ms, mode=args.mode)
    tiled = apply_assignment(g, assignment, problem)
    latencies = refine_latencies(tiled, plat)
    p = plan(tiled, latencies, plat)
    os.makedirs(args.output, exist_ok=True)
    _write_json(os.path.join(args.output, "assignment.json"),
                assignment_to_dict(problem, assignment))
    _write_json(os.path.join(args.output, "tiledgraph.json"),
                tiledgraph_to_dict(tiled))
    _write_json(os.path.join(args.output, "plan.json"), plan_to_dict(p))
    print(f"makespan: {float(p.makespan_cycles):.0f} cycles "
          f"(objective {float(assignment.objective_cycles):.0f}, "
          f"proof {assignment.proof})")
    if args.mode == "exact" and assignment.proof != "optimal":
        print(f"time budget exhausted; incumbent written (gap {assignment.gap:.3f})",
              file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


def cmd_simulate(args):
    plat = load_platform(_read_text(args.platform))
    p = plan_from_dict(json.loads(_read_text(
        os.path.join(args.output, "plan.json"))))
    tl = simulate(p, plat)
    os.makedirs(args.output, exist_ok=True)
    _write_json(os.path.join(args.output, "timeline.json"),
                timeline_to_dict(tl))
    print(f"makespan: {float(tl.makespan_cycles):.0f} cycles")
    print(f"{'device':<12} {'utilization':>11}")
    for dev, u in sorted(tl.utilization.items()):
        print(f"{dev:<12} {u:>10.1%}")
    if args.format == "text":
        art = render_gantt_text(tl)
        with open(os.path.join(args.output, "gantt.txt"), "w") as fh:
            fh.write(art)
        print(art)
    elif args.format == "svg":
        with open(os.path.join(args.output, "gantt.svg"), "w") as fh:
            fh.write(render_gantt_svg(tl))
    return EXIT_OK


def cmd_verify(args):
    g, plat = _load_inputs(args)
    tiled = tiledgraph_from_dict(json.loads(_read_text(
        os.path.join(args.output, "tiledgraph.json"))))
    p = plan_from_dict(json.loads(_read_text(
        os.path.join(args.output, "plan.json"))))
    plan_report = validate_plan(p, tiled, plat)
    inputs, weights = random_tensor_values(g, seed=args.seed)
    eq_report = verify_rewrite(g, tiled, inputs, weights)
    for name, stats in eq_report["outputs"].items():
        line = ", ".join(f"{k}={v}" for k, v in sorted(stats.items()))
        print(f"output {name}: {line}")
    if not plan_report["pass"]:
        for v in plan_report["violations"]:
            print(f"plan violation: {v}", file=sys.stderr)
    ok = plan_report["pass"] and eq_report["pass"]
    print("verify: PASS" if ok else "verify: FAIL")
    return EXIT_OK if ok else 1


def cmd_plan(args):
    g, plat, matches, problem = _front_half(args)
    assignment = solve(problem, budget_ms=args.budget_ms, mode=args.mode)
    os.makedirs(args.output, exist_ok=True)
    _write_json(os.path.join(args.output, "assignment.json"),
                assignment_to_dict(problem, assignment))
    print(f"objective: {float(assignment.objective_cycles):.0f} cycles "
          f"(proof {assignment.proof})")
    if args.mode == "exact" and assignment.proof != "optimal":
        return EXIT_BUDGET
    return EXIT_OK


def cmd_match(args):
    g, plat, matches, problem = _front_half(args)
    os.makedirs(args.output, exist_ok=True)
    doc = {
        "schema": "matcha-matches/1",
        "matches": [{"id": m.id, "pattern": m.pattern, "nodes": list(m.nodes)}
                    for m in matches],
    }
    _write_json(os.path.join(args.output, "matches.json"), doc)
    for m in matches:
        print(f"{m.id:4d} {m.pattern:<24} {' -> '.join(m.nodes)}")
    return EXIT_OK


def cmd_rewrite(args):
    g, plat, matches, problem = _front_half(args)
    assignment = solve(problem, budget_ms=args.budget_ms, mode=args.mode)
    tiled = apply_assignment(g, assignment, problem)
    os.makedirs(args.output, exist_ok=True)
    _write_json(os.path.join(args.output, "tiledgraph.json"),
                tiledgraph_to_dict(tiled))
    print(f"{len(tiled.supernodes)} supernodes, {len(tiled.helpers)} helpers")
    return EXIT_OK


def cmd_map(args):
    g, plat, matches, problem = _front_half(args)
    assignment = solve(problem, budget_ms=args.budget_ms, mode=args.mode)
    tiled = apply_assignment(g, assignment, problem)
    os.makedirs(args.output, exist_ok=True)
    _write_json(os.path.join(args.output, "mappings.json"),
                mapping_report(tiled, plat))
    print(f"mapped {len(tiled.supernodes)} supernodes")
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(
        prog="matcha",
        description="Deployment planning for DNN inference on "
                    "multi-accelerator heterogeneous SoCs.")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name, fn in (("compile", cmd_compile), ("plan", cmd_plan),
                     ("simulate", cmd_simulate), ("verify", cmd_verify),
                     ("match", cmd_match), ("map", cmd_map),
                     ("rewrite", cmd_rewrite)):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        if name != "simulate":
            sp.add_argument("--model", required=True)
        sp.add_argument("--platform", required=True)
        sp.add_argument("--tiles", type=int, default=16)
        sp.add_argument("--mode", choices=("exact", "greedy"), default="exact")
        sp.add_argument("--budget-ms", type=float, default=None)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-o", "--output", default="out")
        sp.add_argument("--format", choices=("json", "text", "svg"),
                        default="json")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.tiles < 1:
            raise MatchaError("tiles must be >= 1")
        if args.budget_ms is not None and args.budget_ms < 0:
            raise MatchaError("budget-ms must be >= 0")
        return args.fn(args)
    except InfeasibleError as e:
        print(f"infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except MatchaError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
