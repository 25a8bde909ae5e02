"""Command line entry points.

    geocloak build-tree --branching 5 --height 2 --out tree.json
    geocloak synthesize --tree tree.json --privacy-level 2 --epsilon 50 \
        --delta 3 --out forest.bin
    geocloak obfuscate --tree tree.json --forest forest.bin \
        --policy policy.json --real 0-0102 --seed 7
    geocloak bench convergence --tree tree.json --seed 1 --out report.json
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from . import bench as bench_mod
from . import forest as forest_mod
from . import synthesis, tree as tree_mod
from .policy import policy_from_json


def _read(path: str) -> str:
    with open(path) as fh:
        return fh.read()


def _load_tree(path: str) -> tree_mod.LocationTree:
    return tree_mod.from_json(_read(path))


def _cmd_build_tree(args) -> int:
    config = tree_mod.TreeConfig(
        branching=args.branching,
        height=args.height,
        cell_size=args.cell_size,
        origin=(args.origin[0], args.origin[1]),
        distance_metric=args.metric,
    )
    tree = tree_mod.build_synthetic_tree(config)
    if args.attributes:
        tree = tree_mod.with_attributes(tree, json.loads(_read(args.attributes)))
    if args.ingest:
        records = tree_mod.read_checkin_csv(args.ingest)
        tree = tree_mod.ingest_checkins(tree, records)
    elif args.synth_checkins:
        records = bench_mod.synth_checkins(
            tree, args.synth_checkins, seed=args.seed, skew=args.skew
        )
        tree = tree_mod.ingest_checkins(tree, records)
    with open(args.out, "w") as fh:
        fh.write(tree_mod.to_json(tree))
    print(f"wrote {args.out}: {len(tree.levels[0])} leaves, hash {tree_mod.tree_hash(tree)[:12]}")
    return 0


def _resolve_targets(args, tree) -> tuple[str, ...]:
    if args.targets:
        return tuple(args.targets.split(","))
    leaves = tree.levels[0]
    return bench_mod.choose_targets(leaves, args.num_targets, args.target_seed)


def _cmd_synthesize(args) -> int:
    tree = _load_tree(args.tree)
    targets = _resolve_targets(args, tree)
    mode = args.rpb_mode
    if mode == "auto":
        k_max = max(
            len(tree_mod.subtree_leaves(tree, n))
            for n in tree_mod.nodes_at_level(tree, args.privacy_level)
        )
        mode = bench_mod._auto_mode(args.delta, k_max)
    config = synthesis.SynthesisConfig(
        epsilon=args.epsilon,
        delta=args.delta,
        targets=targets,
        convergence_threshold=args.xi,
        max_iterations=args.max_iterations,
        rpb_mode=mode,
        centering_gap=args.centering_gap,
    )
    forest = forest_mod.generate_privacy_forest(tree, args.privacy_level, config)
    blob = forest_mod.serialize_forest(forest)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    print(
        f"wrote {args.out}: {len(forest.entries)} subtree matrices, "
        f"epsilon={args.epsilon}, delta={args.delta}, {len(blob)} bytes"
    )
    return 0


def _cmd_obfuscate(args) -> int:
    tree = _load_tree(args.tree)
    with open(args.forest, "rb") as fh:
        forest = forest_mod.deserialize_forest(fh.read())
    if forest.tree_hash != tree_mod.tree_hash(tree):
        print("error: forest was built for a different tree", file=sys.stderr)
        return 2
    policy = policy_from_json(_read(args.policy))
    result = forest_mod.generate_obfuscated_location(
        tree, args.real, policy, forest, args.seed, overflow=args.overflow
    )
    print(json.dumps(dataclasses.asdict(result), sort_keys=True))
    return 0


def _cmd_bench(args) -> int:
    tree = _load_tree(args.tree)
    common = dict(subtree=args.subtree, seed=args.seed)
    if args.xi is not None:
        common["convergence_threshold"] = args.xi
    if args.max_iterations is not None:
        common["max_iterations"] = args.max_iterations
    if args.centering_gap is not None:
        common["centering_gap"] = args.centering_gap
    if args.experiment == "convergence":
        report = bench_mod.run_convergence_experiment(
            tree,
            epsilon=args.epsilon or 50.0,
            deltas=tuple(args.deltas or (3, 5)),
            n_targets=args.num_targets or 20,
            **common,
        )
    elif args.experiment == "epsilon-sweep":
        report = bench_mod.run_epsilon_sweep(
            tree,
            epsilons=tuple(args.epsilons or (50.0, 55.0, 60.0, 65.0, 70.0)),
            deltas=tuple(args.deltas or (0, 3, 5)),
            n_targets=args.num_targets or 49,
            **common,
        )
    elif args.experiment == "delta-sweep":
        report = bench_mod.run_delta_sweep(
            tree,
            epsilon=args.epsilon or 70.0,
            deltas=tuple(args.deltas or (0, 1, 2, 3, 4, 5)),
            n_targets=args.num_targets or 20,
            **common,
        )
    else:
        report = bench_mod.run_violation_experiment(
            tree,
            epsilon=args.epsilon or 70.0,
            trials=args.trials,
            n_targets=args.num_targets or 20,
            **common,
        )
    bench_mod.save_report(report, args.out)
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(bench_mod.report_to_csv(report))
    print(f"wrote {args.out}: experiment {report.experiment} ({report.name})")
    for key, value in report.checks.items():
        print(f"  {key}: {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geocloak",
        description="Prunable budget-constrained location obfuscation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-tree", help="build a synthetic grid hierarchy")
    p.add_argument("--branching", type=int, required=True)
    p.add_argument("--height", type=int, required=True)
    p.add_argument("--cell-size", type=float, default=bench_mod.DEFAULT_CELL_SIZE)
    p.add_argument("--origin", type=float, nargs=2, default=(0.0, 0.0))
    p.add_argument("--metric", choices=("euclidean", "hop"), default="euclidean")
    p.add_argument("--attributes", help="JSON file of per-node attribute maps")
    p.add_argument("--ingest", help="check-in CSV to derive priors from")
    p.add_argument(
        "--synth-checkins",
        type=int,
        default=0,
        help="generate this many synthetic check-ins instead of --ingest",
    )
    p.add_argument("--skew", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_build_tree)

    p = sub.add_parser("synthesize", help="build a privacy forest")
    p.add_argument("--tree", required=True)
    p.add_argument("--privacy-level", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--delta", type=int, required=True)
    p.add_argument("--targets", help="comma-separated leaf ids")
    p.add_argument("--num-targets", type=int, default=20)
    p.add_argument("--target-seed", type=int, default=0)
    p.add_argument("--xi", type=float, default=5e-3)
    p.add_argument("--max-iterations", type=int, default=20)
    p.add_argument(
        "--rpb-mode", choices=("auto", "exact", "approximate"), default="auto"
    )
    p.add_argument(
        "--centering-gap",
        type=float,
        default=synthesis.DEFAULT_CENTERING_GAP,
        help="relative near-optimal slab width for the centered solves",
    )
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_synthesize)

    p = sub.add_parser("obfuscate", help="run the user-side pipeline once")
    p.add_argument("--tree", required=True)
    p.add_argument("--forest", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--real", required=True, help="real location leaf id")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument(
        "--overflow",
        choices=(forest_mod.OVERFLOW_ENFORCE_POLICY, forest_mod.OVERFLOW_ENFORCE_PRIVACY),
        default=forest_mod.OVERFLOW_ENFORCE_POLICY,
    )
    p.set_defaults(func=_cmd_obfuscate)

    p = sub.add_parser("bench", help="run one experiment and save the report")
    p.add_argument(
        "experiment",
        choices=("convergence", "epsilon-sweep", "delta-sweep", "violations"),
    )
    p.add_argument("--tree", required=True)
    p.add_argument("--subtree", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument(
        "--epsilons", type=float, nargs="*", default=None,
        help="epsilon grid for the epsilon-sweep experiment",
    )
    p.add_argument("--deltas", type=int, nargs="*", default=None)
    p.add_argument("--num-targets", type=int, default=None)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--xi", type=float, default=None)
    p.add_argument("--max-iterations", type=int, default=None)
    p.add_argument("--centering-gap", type=float, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", default=None, help="also emit flattened plot data")
    p.set_defaults(func=_cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
