"""Feasible and prune-robust obfuscation matrix synthesis.

The feasible program minimizes expected quality loss subject to the
budget constraints and row unit measure. Robust synthesis additionally
reserves, per ordered pair (i, j), enough budget to absorb the worst
renormalization that removing up to delta columns can cause:

    eps[i, j] = (1 / d(i, j)) * ln max over |S| <= delta of
                (1 - sum_{l in S} z[j, l]) / (1 - sum_{l in S} z[i, l])

and tightens each constraint's exponent to (eps - eps[i, j]) * d(i, j).
Since eps[i, j] depends on the matrix being solved for, the generator
iterates: solve, recompute reserved budgets from the previous iterate,
re-solve, until the mean absolute entrywise change falls below the
convergence threshold.

The exact reserved budget enumerates all C(K, <=delta) subsets. The
approximate variant upper-bounds it in O(K log K) per row using only the
top-delta mass M of row i:

    eps'[i, j] = (1 / d(i, j)) * ln((1 - M * exp(-eps * d(i, j))) / (1 - M))

which dominates the exact value whenever the matrix already satisfies
the plain budget constraint (that prerequisite is asserted).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import lp as lp_mod
from .errors import (
    BudgetExhaustedError,
    CapacityError,
    SynthesisError,
    UnboundableBudgetError,
)
from .geoind import (
    DEFAULT_TOLERANCE,
    ObfuscationMatrix,
    audit_delta_prunable,
    audit_geo_ind,
    pairwise_distances,
    tree_priors,
)
from .tree import LocationTree, centroid_distance

RPB_EXACT = "exact"
RPB_APPROXIMATE = "approximate"

# Caps keeping the exhaustive subset enumeration tractable.
EXACT_DELTA_CAP = 5
EXACT_K_CAP = 25
LP_K_CAP = 40

# Envelope for the build-time exhaustive prunability audit; larger
# instances fall back to the plain audit and say so in the manifest.
PRUNABLE_AUDIT_DELTA_CAP = 3
PRUNABLE_AUDIT_K_CAP = 10

DEFAULT_CENTERING_GAP = 1e-2


@dataclass(frozen=True)
class SynthesisConfig:
    epsilon: float
    delta: int = 0
    targets: tuple[str, ...] = ()
    convergence_threshold: float = 5e-3
    max_iterations: int = 20
    rpb_mode: str = RPB_EXACT
    # Relative width of the near-optimal slab whose analytic center is
    # taken as each round's solution. Wider slabs trade a bounded amount
    # of utility (at most the gap, relatively) for solutions that respond
    # smoothly to the budget tightening, which is what lets the fixpoint
    # iteration settle instead of flip-flopping between near-ties.
    centering_gap: float = DEFAULT_CENTERING_GAP

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.delta < 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if not self.convergence_threshold > 0:
            raise ValueError("convergence_threshold must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.rpb_mode not in (RPB_EXACT, RPB_APPROXIMATE):
            raise ValueError(f"unknown rpb_mode {self.rpb_mode!r}")
        if not self.centering_gap > 0:
            raise ValueError("centering_gap must be positive")
        if not self.targets:
            raise ValueError("target set is empty")
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass(frozen=True)
class RpbTable:
    """Reserved budget per ordered node pair; diagonal zero."""

    node_ids: tuple[str, ...]
    entries: np.ndarray

    def __post_init__(self):
        arr = np.array(self.entries, dtype=float)
        k = len(self.node_ids)
        if arr.shape != (k, k):
            raise ValueError(f"entries shape {arr.shape} does not match {k} ids")
        if k and (not np.all(np.isfinite(arr)) or arr.min() < 0):
            raise ValueError("reserved budgets must be finite and >= 0")
        if k and np.any(np.diag(arr) != 0):
            raise ValueError("diagonal reserved budgets must be 0")
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))


def zero_rpb(node_ids) -> RpbTable:
    ids = tuple(node_ids)
    return RpbTable(node_ids=ids, entries=np.zeros((len(ids), len(ids))))


def _ordered_leaves(subtree_leaves) -> tuple[str, ...]:
    ids = tuple(sorted(subtree_leaves))
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate leaf ids")
    return ids


def _resolve_priors(priors, tree, ids) -> np.ndarray:
    if priors is None:
        return tree_priors(tree, ids)
    from .geoind import as_prior_vector

    return as_prior_vector(priors, ids)


def mean_target_utility(tree: LocationTree, ids, targets) -> np.ndarray:
    """W[k, l] = mean over targets of |d(k, t) - d(l, t)|."""
    d_to = np.array(
        [[centroid_distance(tree, nid, t) for nid in ids] for t in targets]
    )
    w = np.zeros((len(ids), len(ids)))
    for q in range(len(targets)):
        w += np.abs(d_to[q][:, None] - d_to[q][None, :])
    return w / len(targets)


def _build_lp(ids, tree, priors_vec, config, rpb: RpbTable) -> lp_mod.LinearProgram:
    k = len(ids)
    if k < 2:
        raise ValueError(f"need at least 2 leaves, got {k}")
    if k > LP_K_CAP:
        raise CapacityError(f"K={k} exceeds the per-subtree cap of {LP_K_CAP}")
    if rpb.node_ids != ids:
        raise ValueError("reserved budget table is bound to different nodes")
    D = pairwise_distances(tree, ids)
    off = ~np.eye(k, dtype=bool)
    if np.any(D[off] <= 0):
        raise ValueError("distinct nodes with zero distance")
    effective = config.epsilon - rpb.entries
    if np.any(effective[off] <= 0):
        bad = [
            (ids[i], ids[j], float(rpb.entries[i, j]))
            for i, j in zip(*np.nonzero((effective <= 0) & off))
        ]
        raise BudgetExhaustedError(
            f"reserved budget reaches epsilon={config.epsilon} on "
            f"{len(bad)} pairs, first {bad[0][:2]}",
            pairs=bad,
        )
    growth = np.exp(effective * D)

    builder = lp_mod.LpBuilder(k * k)
    w = mean_target_utility(tree, ids, config.targets)
    builder.objective = (priors_vec[:, None] * w).reshape(-1)
    for row in range(k):
        builder.add_eq(range(row * k, row * k + k), [1.0] * k, 1.0)
    # z[i, col] - growth[i, j] * z[j, col] <= 0 for every ordered pair,
    # stated as z[i, col] / growth - z[j, col] <= 0 so that no row's
    # coefficients exceed 1 (growth reaches e^(eps*d) and would otherwise
    # swamp the solver's feasibility tolerance).
    for i in range(k):
        for j in range(k):
            if i == j:
                continue
            inv_g = 1.0 / growth[i, j]
            for col in range(k):
                builder.add_ub((i * k + col, j * k + col), (inv_g, -1.0), 0.0)
    return builder.build()


def build_feasible_lp(subtree_leaves, tree, priors, config) -> lp_mod.LinearProgram:
    """Plain-budget program: constraints at exponent eps * d, no reserve."""
    ids = _ordered_leaves(subtree_leaves)
    vec = _resolve_priors(priors, tree, ids)
    return _build_lp(ids, tree, vec, config, zero_rpb(ids))


def build_robust_lp(
    subtree_leaves, tree, priors, config, rpb: RpbTable
) -> lp_mod.LinearProgram:
    """Tightened program at exponent (eps - eps[i, j]) * d per pair."""
    ids = _ordered_leaves(subtree_leaves)
    vec = _resolve_priors(priors, tree, ids)
    return _build_lp(ids, tree, vec, config, rpb)


def _subset_masses(entries: np.ndarray, delta: int) -> tuple[np.ndarray, list]:
    """All row masses over column subsets |S| <= delta: (n_subsets, K)."""
    k = entries.shape[0]
    blocks = [np.zeros((1, k))]
    subsets: list[tuple[int, ...]] = [()]
    for size in range(1, delta + 1):
        combos = np.array(list(itertools.combinations(range(k), size)))
        blocks.append(entries[:, combos].sum(axis=2).T)
        subsets.extend(map(tuple, combos))
    return np.concatenate(blocks, axis=0), subsets


def compute_rpb_exact(Z: ObfuscationMatrix, delta: int, tree: LocationTree) -> RpbTable:
    """Exhaustive reserved budget over all column subsets |S| <= delta.

    The empty subset is always included, so every budget is >= 0.
    """
    k = Z.k
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta >= k:
        raise CapacityError(f"delta {delta} must be < K {k}")
    if delta > EXACT_DELTA_CAP or k > EXACT_K_CAP:
        raise CapacityError(
            f"exact mode capped at delta <= {EXACT_DELTA_CAP}, K <= {EXACT_K_CAP}; "
            f"got delta={delta}, K={k} (use approximate mode)"
        )
    if delta == 0:
        return zero_rpb(Z.node_ids)
    D = pairwise_distances(tree, Z.node_ids)
    masses, subsets = _subset_masses(Z.entries, delta)
    surviving = 1.0 - masses  # (n_subsets, K)
    dead = surviving <= 1e-12
    if np.any(dead):
        s_idx, row = np.argwhere(dead)[0]
        other = (row + 1) % k
        raise UnboundableBudgetError(
            f"subset {subsets[s_idx]} removes all mass from row "
            f"{Z.node_ids[row]}; budget for pairs such as "
            f"({Z.node_ids[row]}, {Z.node_ids[other]}) is unbounded",
            row_id=Z.node_ids[row],
            subset=tuple(Z.node_ids[c] for c in subsets[s_idx]),
        )
    table = np.zeros((k, k))
    for i in range(k):
        ratios = surviving / surviving[:, i : i + 1]
        worst = np.maximum(ratios.max(axis=0), 1.0)
        row = np.log(worst)
        row[i] = 0.0
        with np.errstate(divide="ignore", invalid="ignore"):
            row = np.where(np.arange(k) == i, 0.0, row / D[i])
        table[i] = row
    return RpbTable(node_ids=Z.node_ids, entries=table)


def compute_rpb_approx(
    Z: ObfuscationMatrix, delta: int, tree: LocationTree, epsilon: float
) -> RpbTable:
    """Top-delta-mass upper bound on the exact reserved budget.

    Valid only for matrices already satisfying the plain budget
    constraint at ``epsilon``; that is checked first because the bound's
    derivation uses it.
    """
    k = Z.k
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta >= k:
        raise CapacityError(f"delta {delta} must be < K {k}")
    report = audit_geo_ind(Z, tree, epsilon, tolerance=DEFAULT_TOLERANCE)
    if not report.ok:
        raise SynthesisError(
            f"approximate reserved budget needs a feasible matrix; "
            f"{report.count} constraint violations at epsilon={epsilon}"
        )
    if delta == 0:
        return zero_rpb(Z.node_ids)
    top = np.sort(Z.entries, axis=1)[:, -delta:].sum(axis=1)  # M per row
    if np.any(top >= 1.0 - 1e-12):
        row = int(np.argmax(top))
        raise UnboundableBudgetError(
            f"top-{delta} mass of row {Z.node_ids[row]} reaches 1; "
            f"no finite reserved budget exists",
            row_id=Z.node_ids[row],
        )
    D = pairwise_distances(tree, Z.node_ids)
    off = ~np.eye(k, dtype=bool)
    table = np.zeros((k, k))
    m = top[:, None]
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log((1.0 - m * np.exp(-epsilon * D)) / (1.0 - m)) / D
    table[off] = np.maximum(val[off], 0.0)
    return RpbTable(node_ids=Z.node_ids, entries=table)


def compute_rpb(
    Z: ObfuscationMatrix,
    delta: int,
    tree: LocationTree,
    mode: str,
    epsilon: float | None = None,
) -> RpbTable:
    if mode == RPB_EXACT:
        return compute_rpb_exact(Z, delta, tree)
    if mode == RPB_APPROXIMATE:
        if epsilon is None:
            raise ValueError("approximate mode needs epsilon")
        return compute_rpb_approx(Z, delta, tree, epsilon)
    raise ValueError(f"unknown rpb_mode {mode!r}")


@dataclass
class SynthesisResult:
    """Final iterate plus the full iteration trace."""

    matrix: ObfuscationMatrix
    iterations: int
    divergence_trace: list[float]
    objectives: list[float]
    converged: bool
    config: SynthesisConfig
    violation_count: int = 0
    violation_tolerance: float = DEFAULT_TOLERANCE
    violation_audit: str = "plain"

    def manifest(self) -> dict:
        return {
            "epsilon": self.config.epsilon,
            "delta": self.config.delta,
            "rpb_mode": self.config.rpb_mode,
            "targets": list(self.config.targets),
            "convergence_threshold": self.config.convergence_threshold,
            "max_iterations": self.config.max_iterations,
            "iterations": self.iterations,
            "converged": self.converged,
            "divergence_trace": list(self.divergence_trace),
            "objectives": list(self.objectives),
            "violations": {
                "epsilon": self.config.epsilon,
                "tolerance": self.violation_tolerance,
                "count": self.violation_count,
                "audit": self.violation_audit,
            },
            "level": self.matrix.level,
            "node_ids": list(self.matrix.node_ids),
        }


def _solve_to_matrix(
    lp, ids, round_label, rel_gap=1e-6
) -> tuple[ObfuscationMatrix, float]:
    # The uniform matrix sits strictly inside every inequality of these
    # programs (each growth factor exceeds 1), which makes it the ideal
    # centering hint. A vertex solution would concentrate each row on a
    # handful of columns and sabotage the budget-reservation step.
    k = len(ids)
    hint = np.full(k * k, 1.0 / k)
    sol = lp_mod.solve_centered(lp, rel_gap=rel_gap, interior_hint=hint)
    if sol.status != lp_mod.STATUS_OPTIMAL:
        raise SynthesisError(
            f"{round_label}: solver returned {sol.status} "
            f"({sol.diagnostics.get('solver_message', '')})"
        )
    return (
        ObfuscationMatrix(level=0, node_ids=ids, entries=sol.x.reshape(k, k)),
        sol.objective_value,
    )


def generate_feasible_matrix(
    subtree_leaves, tree, priors, config
) -> tuple[ObfuscationMatrix, float]:
    """One plain-budget solve; returns the matrix and its objective."""
    ids = _ordered_leaves(subtree_leaves)
    vec = _resolve_priors(priors, tree, ids)
    lp = _build_lp(ids, tree, vec, config, zero_rpb(ids))
    return _solve_to_matrix(lp, ids, "feasible solve", config.centering_gap)


def generate_robust_matrix(
    subtree_leaves, tree, priors, config: SynthesisConfig
) -> SynthesisResult:
    """Fixpoint iteration for a delta-prunable matrix.

    Round 0 solves the plain program. Every later round recomputes the
    reserved budgets from the previous iterate and re-solves the
    tightened program; the loop repeats until the mean absolute
    entrywise difference between successive iterates falls below the
    convergence threshold or max_iterations is hit. The last iterate and
    the full divergence trace are returned either way.
    """
    ids = _ordered_leaves(subtree_leaves)
    vec = _resolve_priors(priors, tree, ids)
    lp0 = _build_lp(ids, tree, vec, config, zero_rpb(ids))
    current, objective = _solve_to_matrix(lp0, ids, "round 0", config.centering_gap)
    trace: list[float] = []
    objectives = [objective]
    converged = False
    iterations = 0
    for round_no in range(1, config.max_iterations + 1):
        if config.delta == 0:
            rpb = zero_rpb(ids)
        else:
            rpb = compute_rpb(
                current, config.delta, tree, config.rpb_mode, config.epsilon
            )
        lp = _build_lp(ids, tree, vec, config, rpb)
        nxt, objective = _solve_to_matrix(
            lp, ids, f"round {round_no}", config.centering_gap
        )
        divergence = float(np.mean(np.abs(nxt.entries - current.entries)))
        trace.append(divergence)
        objectives.append(objective)
        current = nxt
        iterations = round_no
        if divergence < config.convergence_threshold:
            converged = True
            break
    # The matrix's contract is budget-soundness after any prune of up to
    # delta columns; audit exactly that when the enumeration is small,
    # and record which audit the count refers to.
    exhaustive = (
        config.delta <= PRUNABLE_AUDIT_DELTA_CAP
        and len(ids) <= PRUNABLE_AUDIT_K_CAP
    )
    if exhaustive:
        report = audit_delta_prunable(current, tree, config.epsilon, config.delta)
    else:
        report = audit_geo_ind(current, tree, config.epsilon)
    return SynthesisResult(
        matrix=current,
        iterations=iterations,
        divergence_trace=trace,
        objectives=objectives,
        converged=converged,
        config=config,
        violation_count=report.count,
        violation_tolerance=report.tolerance,
        violation_audit="delta_prunable" if exhaustive else "plain",
    )


def random_feasible_matrix(
    tree: LocationTree, leaf_ids, epsilon: float, rng
) -> ObfuscationMatrix:
    """Random matrix guaranteed to satisfy the plain budget constraint.

    Row i is proportional to w[l] * exp(-(eps / 2) * d(i, l)) with random
    positive column weights w. The likelihood ratio of rows i and j then
    splits into exp((eps/2) d(i,j)) from the kernel (reverse triangle
    inequality) times at most exp((eps/2) d(i,j)) from the normalizers
    (triangle inequality), so the product respects exp(eps * d(i, j)).
    Entries are strictly positive.
    """
    ids = _ordered_leaves(leaf_ids)
    k = len(ids)
    if k < 2:
        raise ValueError("need at least 2 leaves")
    D = pairwise_distances(tree, ids)
    w = rng.uniform(0.5, 2.0, size=k)
    raw = w[None, :] * np.exp(-(epsilon / 2.0) * D)
    entries = raw / raw.sum(axis=1, keepdims=True)
    return ObfuscationMatrix(level=0, node_ids=ids, entries=entries)
