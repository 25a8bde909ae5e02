"""Experiment harness: seed-deterministic runs emitting re-auditable reports.

Four experiments are reproduced at desk scale on synthetic grid trees:
fixpoint convergence, quality loss versus budget, quality loss versus
prunability degree, and budget violations after pruning for robust
versus non-robust builds. Absolute loss values depend on the distance
units, so the reproduction targets are the trend shapes; every report
carries enough provenance (tree hash, config, seeds) to re-audit any
matrix offline.
"""

from __future__ import annotations

import csv
import io
import json
import platform
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta

import numpy as np
import scipy

from .errors import PruningInfeasibleError
from .geoind import audit_geo_ind, expected_loss
from .policy import prune_matrix
from .synthesis import (
    DEFAULT_CENTERING_GAP,
    RPB_APPROXIMATE,
    RPB_EXACT,
    EXACT_DELTA_CAP,
    EXACT_K_CAP,
    SynthesisConfig,
    generate_robust_matrix,
)
from .tree import (
    CheckInRecord,
    LocationTree,
    TreeConfig,
    build_synthetic_tree,
    subtree_leaves,
    tree_hash,
)

REPORT_SCHEMA_VERSION = 1

# epsilon in [50, 70] is interpreted per unit distance; with 0.02-unit
# cells adjacent leaves sit at eps*d of about 1, which keeps the
# constraints binding without blowing up the exponentials.
DEFAULT_CELL_SIZE = 0.02


@dataclass
class ExperimentReport:
    experiment: int
    name: str
    params: dict
    cells: list[dict]
    checks: dict
    tree_hash: str
    seed: int
    environment: dict = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION


def environment_fingerprint() -> dict:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
    }


def make_bench_tree(
    branching: int = 5,
    height: int = 2,
    cell_size: float = DEFAULT_CELL_SIZE,
    distance_metric: str = "euclidean",
) -> LocationTree:
    """Default desk-scale tree (25 leaves on a 5x5 grid)."""
    return build_synthetic_tree(
        TreeConfig(
            branching=branching,
            height=height,
            cell_size=cell_size,
            distance_metric=distance_metric,
        )
    )


def synth_checkins(
    tree: LocationTree, n: int, seed: int, skew: float = 0.0
) -> list[CheckInRecord]:
    """Synthetic check-in stream with a Zipf-skewed leaf distribution.

    Leaf weights are (rank + 1) ** -skew over the lexicographic leaf
    order, so skew 0 is uniform. Positions land uniformly inside the
    chosen cell. Deterministic per seed.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 records, got {n}")
    if skew < 0:
        raise ValueError(f"skew must be >= 0, got {skew}")
    leaves = list(tree.levels[0])
    weights = np.array([(rank + 1.0) ** -skew for rank in range(len(leaves))])
    weights /= weights.sum()
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(leaves), size=n, p=weights)
    half = (tree.config.cell_size / 2.0) if tree.config else 0.0
    base = datetime(2020, 1, 1)
    records = []
    for i, pick in enumerate(picks):
        node = tree.nodes[leaves[pick]]
        dx = rng.uniform(-half, half)
        dy = rng.uniform(-half, half)
        records.append(
            CheckInRecord(
                user=f"u{i % 53}",
                timestamp=(base + timedelta(minutes=i)).isoformat() + "Z",
                lat=node.centroid[1] + dy,
                lon=node.centroid[0] + dx,
                location_id=node.id,
            )
        )
    return records


def choose_targets(leaves, count: int, seed: int) -> tuple[str, ...]:
    """Deterministic target draw; falls back to replacement when the pool
    is smaller than the requested count."""
    pool = sorted(leaves)
    rng = random.Random(seed)
    if count <= len(pool):
        return tuple(rng.sample(pool, count))
    return tuple(rng.choices(pool, k=count))


def _auto_mode(delta: int, k: int) -> str:
    return RPB_EXACT if delta <= EXACT_DELTA_CAP and k <= EXACT_K_CAP else RPB_APPROXIMATE


def _base_report(experiment, name, params, cells, checks, tree, seed) -> ExperimentReport:
    return ExperimentReport(
        experiment=experiment,
        name=name,
        params=params,
        cells=cells,
        checks=checks,
        tree_hash=tree_hash(tree),
        seed=seed,
        environment=environment_fingerprint(),
    )


def _trend_non_increasing(values, rel=0.01) -> bool:
    return all(
        b <= a + rel * max(abs(a), abs(b)) + 1e-15
        for a, b in zip(values, values[1:])
    )


def run_convergence_experiment(
    tree: LocationTree,
    subtree: str | None = None,
    epsilon: float = 50.0,
    deltas=(3, 5),
    n_targets: int = 20,
    seed: int = 0,
    convergence_threshold: float = 5e-3,
    max_iterations: int = 10,
    rpb_mode: str | None = None,
    centering_gap: float = DEFAULT_CENTERING_GAP,
) -> ExperimentReport:
    """Divergence trace of the robust fixpoint per delta."""
    root = subtree or tree.root
    leaves = subtree_leaves(tree, root)
    targets = choose_targets(leaves, n_targets, seed)
    cells = []
    for delta in deltas:
        config = SynthesisConfig(
            epsilon=epsilon,
            delta=delta,
            targets=targets,
            convergence_threshold=convergence_threshold,
            max_iterations=max_iterations,
            rpb_mode=rpb_mode or _auto_mode(delta, len(leaves)),
            centering_gap=centering_gap,
        )
        try:
            result = generate_robust_matrix(leaves, tree, None, config)
        except Exception as exc:
            cells.append({"delta": delta, "failed": True, "reason": str(exc)})
            continue
        cells.append(
            {
                "delta": delta,
                "iterations": result.iterations,
                "converged": result.converged,
                "divergence_trace": result.divergence_trace,
                "final_divergence": result.divergence_trace[-1],
                "objectives": result.objectives,
                "rpb_mode": config.rpb_mode,
            }
        )
    checks = {
        "all_converged": all(c.get("converged") for c in cells),
        "threshold": convergence_threshold,
    }
    params = {
        "subtree": root,
        "epsilon": epsilon,
        "deltas": list(deltas),
        "n_targets": n_targets,
        "k": len(leaves),
        "convergence_threshold": convergence_threshold,
        "max_iterations": max_iterations,
    }
    return _base_report(1, "convergence", params, cells, checks, tree, seed)


def run_epsilon_sweep(
    tree: LocationTree,
    subtree: str | None = None,
    epsilons=(50.0, 55.0, 60.0, 65.0, 70.0),
    deltas=(0, 3, 5),
    n_targets: int = 49,
    seed: int = 0,
    convergence_threshold: float = 5e-3,
    max_iterations: int = 20,
    rpb_mode: str | None = None,
    centering_gap: float = DEFAULT_CENTERING_GAP,
) -> ExperimentReport:
    """Expected loss per (epsilon, delta) under uniform priors."""
    root = subtree or tree.root
    leaves = subtree_leaves(tree, root)
    priors = {nid: 1.0 for nid in leaves}
    targets = choose_targets(leaves, n_targets, seed)
    cells = []
    losses: dict[tuple, float] = {}
    for delta in deltas:
        for epsilon in epsilons:
            config = SynthesisConfig(
                epsilon=epsilon,
                delta=delta,
                targets=targets,
                convergence_threshold=convergence_threshold,
                max_iterations=max_iterations,
                rpb_mode=rpb_mode or _auto_mode(delta, len(leaves)),
                centering_gap=centering_gap,
            )
            try:
                result = generate_robust_matrix(leaves, tree, priors, config)
            except Exception as exc:
                cells.append(
                    {"epsilon": epsilon, "delta": delta, "failed": True, "reason": str(exc)}
                )
                continue
            loss = expected_loss(result.matrix, tree, priors, targets)
            losses[(epsilon, delta)] = loss
            cells.append(
                {
                    "epsilon": epsilon,
                    "delta": delta,
                    "expected_loss": loss,
                    "iterations": result.iterations,
                    "converged": result.converged,
                }
            )
    eps_trend = {
        str(delta): _trend_non_increasing(
            [losses[(e, delta)] for e in epsilons if (e, delta) in losses]
        )
        for delta in deltas
    }
    delta_trend = {
        str(epsilon): all(
            losses.get((epsilon, lo), 0.0)
            <= losses.get((epsilon, hi), 0.0)
            + 0.01 * max(losses.get((epsilon, lo), 0.0), losses.get((epsilon, hi), 0.0))
            + 1e-15
            for lo, hi in zip(sorted(deltas), sorted(deltas)[1:])
        )
        for epsilon in epsilons
    }
    checks = {
        "loss_non_increasing_in_epsilon": eps_trend,
        "loss_non_decreasing_in_delta": delta_trend,
        "all_cells_ok": all(not c.get("failed") for c in cells),
    }
    params = {
        "subtree": root,
        "epsilons": list(epsilons),
        "deltas": list(deltas),
        "n_targets": n_targets,
        "k": len(leaves),
        "priors": "uniform",
    }
    return _base_report(2, "epsilon-sweep", params, cells, checks, tree, seed)


def run_delta_sweep(
    tree: LocationTree,
    subtree: str | None = None,
    deltas=(0, 1, 2, 3, 4, 5),
    epsilon: float = 70.0,
    repeats: int = 5,
    n_targets: int = 49,
    seed: int = 0,
    convergence_threshold: float = 5e-3,
    max_iterations: int = 20,
    rpb_mode: str | None = None,
    centering_gap: float = DEFAULT_CENTERING_GAP,
) -> ExperimentReport:
    """Mean expected loss per delta over independently seeded repeats.

    Uniform priors so the prior distribution does not interact with the
    budget reservation under study."""
    root = subtree or tree.root
    leaves = subtree_leaves(tree, root)
    priors = {nid: 1.0 for nid in leaves}
    cells = []
    means = {}
    for delta in deltas:
        per_seed = []
        for r in range(repeats):
            targets = choose_targets(leaves, n_targets, seed + 7919 * r)
            config = SynthesisConfig(
                epsilon=epsilon,
                delta=delta,
                targets=targets,
                convergence_threshold=convergence_threshold,
                max_iterations=max_iterations,
                rpb_mode=rpb_mode or _auto_mode(delta, len(leaves)),
                centering_gap=centering_gap,
            )
            try:
                result = generate_robust_matrix(leaves, tree, priors, config)
            except Exception as exc:
                cells.append(
                    {"delta": delta, "repeat": r, "failed": True, "reason": str(exc)}
                )
                continue
            loss = expected_loss(result.matrix, tree, priors, targets)
            per_seed.append(loss)
            cells.append(
                {
                    "delta": delta,
                    "repeat": r,
                    "expected_loss": loss,
                    "iterations": result.iterations,
                    "converged": result.converged,
                }
            )
        if per_seed:
            means[delta] = float(np.mean(per_seed))
    ordered = [means[d] for d in sorted(means)]
    checks = {
        "mean_loss_non_decreasing_in_delta": _trend_non_increasing(ordered[::-1]),
        "mean_loss_per_delta": {str(d): means[d] for d in sorted(means)},
        "all_cells_ok": all(not c.get("failed") for c in cells),
    }
    params = {
        "subtree": root,
        "deltas": list(deltas),
        "epsilon": epsilon,
        "repeats": repeats,
        "n_targets": n_targets,
        "k": len(leaves),
    }
    return _base_report(3, "delta-sweep", params, cells, checks, tree, seed)


def run_violation_experiment(
    tree: LocationTree,
    subtree: str | None = None,
    epsilon: float = 70.0,
    caps=(5, 7),
    robust_delta: int = 5,
    trials: int = 20,
    n_targets: int = 20,
    seed: int = 0,
    convergence_threshold: float = 5e-3,
    max_iterations: int = 20,
    centering_gap: float = DEFAULT_CENTERING_GAP,
) -> ExperimentReport:
    """Budget violations after pruning r random leaves, robust vs plain.

    Two builds share every cap: delta=0 (non-robust) and delta=robust_delta.
    r sweeps 0..cap, so the larger cap deliberately exceeds the built delta
    and residual violations on the robust matrix become visible. Uniform
    priors; prune sets are uniform among leaves excluding a per-trial real
    location; infeasible prunes are recorded as failed cells.
    """
    root = subtree or tree.root
    leaves = subtree_leaves(tree, root)
    priors = {nid: 1.0 for nid in leaves}
    targets = choose_targets(leaves, n_targets, seed)
    builds = {}
    for built_delta in (0, robust_delta):
        config = SynthesisConfig(
            epsilon=epsilon,
            delta=built_delta,
            targets=targets,
            convergence_threshold=convergence_threshold,
            max_iterations=max_iterations,
            rpb_mode=_auto_mode(built_delta, len(leaves)),
            centering_gap=centering_gap,
        )
        builds[built_delta] = generate_robust_matrix(leaves, tree, priors, config).matrix
    cells = []
    mean_violations: dict[tuple, float] = {}
    for cap in caps:
        for built_delta, matrix in builds.items():
            for removed in range(cap + 1):
                rng = random.Random(
                    seed * 1000003 + cap * 10007 + built_delta * 101 + removed
                )
                counts = []
                for trial in range(trials):
                    real = rng.choice(leaves)
                    candidates = [nid for nid in leaves if nid != real]
                    prune = sorted(rng.sample(candidates, removed))
                    cell = {
                        "cap": cap,
                        "built_delta": built_delta,
                        "removed": removed,
                        "trial": trial,
                        "real": real,
                    }
                    try:
                        pruned = prune_matrix(matrix, prune)
                    except PruningInfeasibleError as exc:
                        cell.update(failed=True, reason=f"pruning infeasible: {exc.row_id}")
                        cells.append(cell)
                        continue
                    count = audit_geo_ind(pruned, tree, epsilon).count
                    counts.append(count)
                    cell["violations"] = count
                    cells.append(cell)
                if counts:
                    mean_violations[(cap, built_delta, removed)] = float(np.mean(counts))
    checks = {
        "mean_violations": {
            f"cap{cap}/delta{bd}/removed{r}": v
            for (cap, bd, r), v in sorted(mean_violations.items())
        },
        "robust_no_worse": all(
            mean_violations.get((cap, robust_delta, r), 0.0)
            <= mean_violations.get((cap, 0, r), 0.0) + 1e-12
            for cap in caps
            for r in range(cap + 1)
            if (cap, robust_delta, r) in mean_violations
            and (cap, 0, r) in mean_violations
        ),
    }
    params = {
        "subtree": root,
        "epsilon": epsilon,
        "caps": list(caps),
        "robust_delta": robust_delta,
        "trials": trials,
        "n_targets": n_targets,
        "k": len(leaves),
    }
    return _base_report(4, "violations", params, cells, checks, tree, seed)


# ---------------------------------------------------------------------------
# report emission


def report_to_json(report: ExperimentReport) -> str:
    payload = {
        "schema_version": report.schema_version,
        "experiment": report.experiment,
        "name": report.name,
        "params": report.params,
        "cells": report.cells,
        "checks": report.checks,
        "tree_hash": report.tree_hash,
        "seed": report.seed,
        "environment": report.environment,
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def report_from_json(text: str) -> ExperimentReport:
    payload = json.loads(text)
    return ExperimentReport(
        experiment=payload["experiment"],
        name=payload["name"],
        params=payload["params"],
        cells=payload["cells"],
        checks=payload["checks"],
        tree_hash=payload["tree_hash"],
        seed=payload["seed"],
        environment=payload.get("environment", {}),
        schema_version=payload.get("schema_version", REPORT_SCHEMA_VERSION),
    )


def save_report(report: ExperimentReport, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(report_to_json(report))
        fh.write("\n")


def report_to_csv(report: ExperimentReport) -> str:
    """Flatten the cells into plot-ready CSV (scalar fields only)."""
    keys: list[str] = []
    for cell in report.cells:
        for key, value in cell.items():
            if isinstance(value, (int, float, str, bool)) and key not in keys:
                keys.append(key)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=keys, extrasaction="ignore")
    writer.writeheader()
    for cell in report.cells:
        writer.writerow(
            {k: v for k, v in cell.items() if isinstance(v, (int, float, str, bool))}
        )
    return buf.getvalue()
