"""Command-line front end: gen-scene, partition, place, simulate, compare.

Every command takes flags and/or --config (a JSON document whose keys match
the flag names); flags override config values.  The effective configuration
is echoed into the output directory as config.json so runs are reproducible
from that file alone.

Exit codes: 0 success, 2 usage, 3 data/format error, 4 constraint or
infeasibility error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import partition as pt
from . import placement as pl
from . import scene as sc
from . import simulator as sim
from . import visibility as vis
from .errors import (
    ComparisonError,
    ConfigurationError,
    ConsistencyError,
    ConstraintError,
    DatasetFormatError,
    DatasetVersionError,
    InfeasiblePartitionError,
    ParameterError,
    SplatSchedError,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_CONSTRAINT = 4


def _echo_config(out_dir: str, args: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    clean = {k: v for k, v in args.items() if k not in ("func", "config")}
    with open(os.path.join(out_dir, "config.json"), "w") as f:
        json.dump(clean, f, indent=1, sort_keys=True, default=str)


def _apply_config(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """Fill unset flags from --config JSON; explicit flags win."""
    if not getattr(args, "config", None):
        return
    try:
        with open(args.config) as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        parser.error(f"cannot read config {args.config}: {e}")
    sub = next(
        a for a in parser._actions if isinstance(a, argparse._SubParsersAction)
    )
    subparser = sub.choices[args.command]
    defaults = {
        a.dest: a.default for a in subparser._actions if a.dest != "help"
    }
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest in defaults and getattr(args, dest) == defaults[dest]:
            setattr(args, dest, value)


def _parse_waypoints(text: str) -> list:
    try:
        return [
            [float(c) for c in chunk.split(",")] for chunk in text.split(";")
        ]
    except ValueError as e:
        raise ParameterError(f"bad waypoint list {text!r}: {e}") from e


def cmd_gen_scene(args) -> int:
    duration = args.duration
    if args.kind == "temporal" and duration is None:
        duration = 10.0
    if args.kind in ("aerial", "temporal"):
        dataset = sc.generate_aerial_scene(
            seed=args.seed,
            n_points=args.points,
            grid=(args.grid_rows, args.grid_cols),
            n_views=args.views,
            altitude=args.altitude,
            duration=duration,
        )
    else:
        wps = _parse_waypoints(args.waypoints)
        dataset = sc.generate_street_scene(
            seed=args.seed,
            n_points=args.points,
            trajectory_waypoints=wps,
            n_views=args.views,
            duration=duration,
        )
    sc.save_dataset(dataset, args.out)
    _echo_config(args.out, vars(args))
    print(f"wrote {args.out}/dataset.json and points.bin "
          f"({args.points} points, {args.views} views)")
    return EXIT_OK


def _partition_pipeline(dataset, G, machines, gpus_per_machine, eps, seed):
    grouped = vis.zorder_group(dataset.cloud, G)
    graph = pt.build_bipartite_graph(grouped, dataset)
    assignment = pt.hierarchical_partition(
        graph, machines, gpus_per_machine, eps, seed
    )
    return grouped, graph, assignment


def cmd_partition(args) -> int:
    dataset = sc.load_dataset(args.dataset)
    _, graph, assignment = _partition_pipeline(
        dataset, args.group_size, args.machines, args.gpus_per_machine,
        args.eps, args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    pt.save_partition_csv(assignment, os.path.join(args.out, "partition.csv"))
    labels = np.concatenate([assignment.flat_gpus(), assignment.image_machine])
    quality = pt.evaluate_partition(graph, labels, assignment.n_gpus)
    pt.save_quality_json(quality, os.path.join(args.out, "quality.json"))
    _echo_config(args.out, vars(args))
    print(f"cut={quality.edge_cut:g} balance={quality.balance:.4f}")
    return EXIT_OK


def cmd_place(args) -> int:
    matrix = vis.load_access_matrix_csv(args.matrix)
    coeffs = pl.CostCoefficients(
        alpha=args.alpha, beta=args.beta, gamma=args.gamma,
        delta=args.delta, p=args.p,
    )
    B, N = matrix.shape
    if B % N != 0:
        raise ConstraintError(f"{N} GPUs must divide {B} patches")
    sol = pl.place(matrix, coeffs)
    os.makedirs(args.out, exist_ok=True)
    pl.save_solution_csv(sol, os.path.join(args.out, "solution.csv"))
    breakdown = pl.objective(matrix, sol, coeffs)
    pl.save_breakdown_json(breakdown, os.path.join(args.out, "objective.json"))
    _echo_config(args.out, vars(args))
    print(f"total_local={breakdown.total_local} "
          f"max_send={breakdown.max_send} max_recv={breakdown.max_recv} "
          f"max_comp={breakdown.max_comp}")
    return EXIT_OK


def _topology_from_args(args) -> sim.ClusterTopology:
    return sim.ClusterTopology(
        machines=args.machines,
        gpus_per_machine=args.gpus_per_machine,
        inter_bandwidth=args.inter_bandwidth,
        intra_bandwidth=args.intra_bandwidth,
    )


def _strategy_from_args(args, name: str):
    if name == "random":
        return sim.RandomStrategy(seed=args.seed)
    return sim.LocalityAwareStrategy(
        group_size=args.group_size,
        eps=args.eps,
        seed=args.seed,
        inter_coeffs=pl.CostCoefficients(p=args.p),
        intra_coeffs=pl.intra_node_coefficients(p=args.p),
    )


def cmd_simulate(args) -> int:
    dataset = sc.load_dataset(args.dataset)
    topology = _topology_from_args(args)
    report = sim.run_training_sim(
        dataset, topology, _strategy_from_args(args, args.strategy),
        epochs=args.epochs, batch_size=args.batch_size, P=args.patch_factor,
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    sim.save_report_json(report, os.path.join(args.out, "report.json"))
    sim.save_iterations_csv(report, os.path.join(args.out, "iterations.csv"))
    _echo_config(args.out, vars(args))
    print(f"{args.strategy}: inter-machine points (forward) = "
          f"{report.total_inter_points_forward}")
    return EXIT_OK


def cmd_compare(args) -> int:
    dataset = sc.load_dataset(args.dataset)
    topology = _topology_from_args(args)
    reports = {}
    for name in ("random", "locality"):
        reports[name] = sim.run_training_sim(
            dataset, topology, _strategy_from_args(args, name),
            epochs=args.epochs, batch_size=args.batch_size,
            P=args.patch_factor, seed=args.seed,
        )
    os.makedirs(args.out, exist_ok=True)
    for name, report in reports.items():
        sim.save_report_json(
            report, os.path.join(args.out, f"report_{name}.json")
        )
        sim.save_iterations_csv(
            report, os.path.join(args.out, f"iterations_{name}.csv")
        )
    reduction = sim.comm_reduction(reports["random"], reports["locality"])
    payload = {
        "reduction_percent_forward": reduction,
        "baseline_inter_points_forward": reports["random"].total_inter_points_forward,
        "ours_inter_points_forward": reports["locality"].total_inter_points_forward,
        "baseline_inter_points_both": reports["random"].total_inter_points_both,
        "ours_inter_points_both": reports["locality"].total_inter_points_both,
        "baseline_comp_imbalance": reports["random"].comp_imbalance,
        "ours_comp_imbalance": reports["locality"].comp_imbalance,
        "baseline_ownership_hit_rate": reports["random"].ownership_hit_rate,
        "ours_ownership_hit_rate": reports["locality"].ownership_hit_rate,
    }
    with open(os.path.join(args.out, "reduction.json"), "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)
    _echo_config(args.out, vars(args))
    print(f"communication reduction: {reduction:.1f}%")
    return EXIT_OK


def _add_topology_args(p):
    p.add_argument("--machines", type=int, default=1)
    p.add_argument("--gpus-per-machine", type=int, default=1)
    p.add_argument("--inter-bandwidth", type=float, default=25e9)
    p.add_argument("--intra-bandwidth", type=float, default=300e9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatsched",
        description="Locality-aware placement and communication simulator "
        "for distributed point-based rendering training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic dataset")
    g.add_argument("kind", choices=["aerial", "street", "temporal"])
    g.add_argument("--points", type=int, default=100000)
    g.add_argument("--views", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--grid-rows", type=int, default=4)
    g.add_argument("--grid-cols", type=int, default=4)
    g.add_argument("--altitude", type=float, default=50.0)
    g.add_argument("--waypoints", default="0,0,0;200,0,0")
    g.add_argument("--duration", type=float, default=None)
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("partition", help="offline point placement")
    p.add_argument("--dataset", required=True)
    p.add_argument("--machines", type=int, default=1)
    p.add_argument("--gpus-per-machine", type=int, default=1)
    p.add_argument("--group-size", "-G", type=int, default=2048)
    p.add_argument("--eps", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    r = sub.add_parser("place", help="trace-replay placement on a matrix CSV")
    r.add_argument("--matrix", required=True)
    r.add_argument("--alpha", type=float, default=1.0)
    r.add_argument("--beta", type=float, default=0.25)
    r.add_argument("--gamma", type=float, default=0.25)
    r.add_argument("--delta", type=float, default=0.5)
    r.add_argument("--p", type=float, default=2.0)
    r.add_argument("--config", default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_place)

    for name, fn in (("simulate", cmd_simulate), ("compare", cmd_compare)):
        s = sub.add_parser(name, help=f"{name} training communication")
        s.add_argument("--dataset", required=True)
        _add_topology_args(s)
        if name == "simulate":
            s.add_argument("--strategy", choices=["random", "locality"],
                           default="locality")
        s.add_argument("--epochs", type=int, default=1)
        s.add_argument("--batch-size", type=int, default=16)
        s.add_argument("--patch-factor", "-P", type=int, default=2)
        s.add_argument("--group-size", "-G", type=int, default=2048)
        s.add_argument("--eps", type=float, default=0.05)
        s.add_argument("--p", type=float, default=2.0)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--config", default=None)
        s.add_argument("--out", required=True)
        s.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_config(args, parser)
    try:
        return args.func(args)
    except (DatasetFormatError, DatasetVersionError, ConsistencyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ConstraintError, InfeasiblePartitionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONSTRAINT
    except (ParameterError, ConfigurationError, ComparisonError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except SplatSchedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
