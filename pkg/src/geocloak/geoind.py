"""Obfuscation matrices, privacy audits, and expected quality loss.

An obfuscation matrix is row-stochastic: row = true location, column =
reported location, entry = reporting probability. The privacy criterion
bounds every likelihood ratio by the exponential of the budget times the
distance between the two true locations:

    z[i, k] - exp(eps * d(i, j)) * z[j, k] <= 0   for all i != j, all k.

Audits evaluate this linear form directly. The prunability audit repeats
it on every renormalized submatrix reachable by removing up to delta
columns, which is the exhaustive oracle the synthesis guarantees are
checked against.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, LevelMismatchError, MatrixError
from .tree import LocationTree, centroid_distance, distance

MATRIX_FORMAT = "obfuscation-matrix"
MATRIX_FORMAT_VERSION = 1

DEFAULT_TOLERANCE = 1e-6
ROW_SUM_TOLERANCE = 1e-9
# Entries this far below zero are treated as solver round-off and clamped.
ENTRY_CLAMP = 1e-9


@dataclass(frozen=True, eq=False)
class ObfuscationMatrix:
    """Row-stochastic matrix bound to an ordered node list at one level."""

    level: int
    node_ids: tuple[str, ...]
    entries: np.ndarray

    def __post_init__(self):
        arr = np.array(self.entries, dtype=float)
        k = len(self.node_ids)
        if arr.shape != (k, k):
            raise MatrixError(f"entries shape {arr.shape} does not match {k} ids")
        if len(set(self.node_ids)) != k:
            raise MatrixError("node ids must be unique")
        if k and not np.all(np.isfinite(arr)):
            raise MatrixError("entries must be finite")
        if k and arr.min() < -ENTRY_CLAMP:
            raise MatrixError(f"negative entry {arr.min()}")
        np.clip(arr, 0.0, None, out=arr)
        if k:
            sums = arr.sum(axis=1)
            bad = np.argmax(np.abs(sums - 1.0))
            if abs(sums[bad] - 1.0) > ROW_SUM_TOLERANCE:
                raise MatrixError(
                    f"row {self.node_ids[bad]} sums to {sums[bad]}, not 1"
                )
        arr.flags.writeable = False
        object.__setattr__(self, "entries", arr)
        object.__setattr__(self, "node_ids", tuple(self.node_ids))

    @property
    def k(self) -> int:
        return len(self.node_ids)

    def row_index(self, nid: str) -> int:
        try:
            return self.node_ids.index(nid)
        except ValueError:
            raise MatrixError(f"{nid!r} is not bound to this matrix") from None

    def __eq__(self, other):
        if not isinstance(other, ObfuscationMatrix):
            return NotImplemented
        return (
            self.level == other.level
            and self.node_ids == other.node_ids
            and np.array_equal(self.entries, other.entries)
        )


@dataclass(frozen=True)
class GeoIndReport:
    """Audit outcome: every (i, j, k) whose slack exceeds the tolerance."""

    epsilon: float
    tolerance: float
    violations: tuple[tuple[int, int, int, float], ...] = field(default=())

    @property
    def count(self) -> int:
        return len(self.violations)

    @property
    def max_slack(self) -> float:
        return max((v[3] for v in self.violations), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.violations


def pairwise_distances(tree: LocationTree, node_ids) -> np.ndarray:
    """Dense distance matrix for same-level nodes under the tree metric."""
    ids = list(node_ids)
    if ids:
        levels = {tree.nodes[n].level for n in ids}
        if len(levels) > 1:
            raise LevelMismatchError(f"mixed levels {sorted(levels)}")
    pts = np.array([tree.nodes[n].centroid for n in ids], dtype=float)
    if not len(ids):
        return np.zeros((0, 0))
    dx = pts[:, 0][:, None] - pts[:, 0][None, :]
    dy = pts[:, 1][:, None] - pts[:, 1][None, :]
    if tree.distance_metric == "hop":
        return np.abs(dx) + np.abs(dy)
    return np.hypot(dx, dy)


def _slack_cube(entries: np.ndarray, growth: np.ndarray) -> np.ndarray:
    """slack[i, j, k] = z[i, k] - growth[i, j] * z[j, k]."""
    return entries[:, None, :] - growth[:, :, None] * entries[None, :, :]


def _collect_violations(slack, tolerance, index_map=None):
    k = slack.shape[0]
    if k:
        ii = np.arange(k)
        slack[ii, ii, :] = -np.inf  # i == j pairs are vacuous
    out = []
    for i, j, col in zip(*np.nonzero(slack > tolerance)):
        oi, oj, ok_ = (
            (index_map[i], index_map[j], index_map[col])
            if index_map is not None
            else (i, j, col)
        )
        out.append((int(oi), int(oj), int(ok_), float(slack[i, j, col])))
    return out


def audit_geo_ind(
    Z: ObfuscationMatrix,
    tree: LocationTree,
    epsilon: float,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GeoIndReport:
    """Check the budget constraint on every ordered pair and column.

    Violations are sorted by (i, j, k); indices refer to Z.node_ids.
    """
    if Z.k == 0:
        return GeoIndReport(epsilon=epsilon, tolerance=tolerance)
    D = pairwise_distances(tree, Z.node_ids)
    slack = _slack_cube(Z.entries, np.exp(epsilon * D))
    violations = sorted(_collect_violations(slack, tolerance))
    return GeoIndReport(
        epsilon=epsilon, tolerance=tolerance, violations=tuple(violations)
    )


def audit_constant_budget(
    Z: ObfuscationMatrix, kappa: float, tolerance: float = DEFAULT_TOLERANCE
) -> GeoIndReport:
    """Distance-free variant: z[i, k] - exp(kappa) * z[j, k] <= 0.

    This is the form precision reduction provably preserves; the
    distance-weighted form is not guaranteed across levels.
    """
    growth = np.full((Z.k, Z.k), math.exp(kappa))
    slack = _slack_cube(Z.entries, growth)
    violations = sorted(_collect_violations(slack, tolerance))
    return GeoIndReport(epsilon=kappa, tolerance=tolerance, violations=tuple(violations))


def constant_budget_of(Z: ObfuscationMatrix) -> float:
    """Smallest kappa for which audit_constant_budget passes (inf if none)."""
    z = Z.entries
    worst = 0.0
    for i in range(Z.k):
        for j in range(Z.k):
            if i == j:
                continue
            pos = z[i] > 0
            if np.any(pos & (z[j] == 0)):
                return math.inf
            if np.any(pos):
                worst = max(worst, float(np.max(np.log(z[i][pos] / z[j][pos]))))
    return worst


def max_distance_weighted_slack(
    Z: ObfuscationMatrix, tree: LocationTree, epsilon: float
) -> float:
    """Largest distance-weighted slack, reported informationally."""
    if Z.k == 0:
        return 0.0
    D = pairwise_distances(tree, Z.node_ids)
    slack = _slack_cube(Z.entries, np.exp(epsilon * D))
    ii = np.arange(Z.k)
    slack[ii, ii, :] = -np.inf
    return float(slack.max()) if Z.k > 1 else 0.0


def audit_delta_prunable(
    Z: ObfuscationMatrix,
    tree: LocationTree,
    epsilon: float,
    delta: int,
    tolerance: float = DEFAULT_TOLERANCE,
) -> GeoIndReport:
    """Exhaustive prunability oracle.

    Enumerates every column subset S with |S| <= delta, renormalizes the
    surviving rows by their surviving mass, and audits the result.
    Subsets that zero out some surviving row's mass are skipped (pruning
    is infeasible there). Violations are aggregated as the max slack per
    surviving (i, j, k) triple, indices in Z.node_ids space, sorted.
    Intended for K <= 25 and delta <= 5.
    """
    k = Z.k
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    if delta >= k:
        raise CapacityError(f"delta {delta} must be < K {k}")
    D = pairwise_distances(tree, Z.node_ids)
    growth = np.exp(epsilon * D)
    worst: dict[tuple[int, int, int], float] = {}
    indices = np.arange(k)
    for size in range(delta + 1):
        for S in itertools.combinations(range(k), size):
            keep = np.setdiff1d(indices, S, assume_unique=True)
            mass = Z.entries[keep][:, list(S)].sum(axis=1) if size else np.zeros(len(keep))
            if np.any(mass >= 1.0 - 1e-12):
                continue
            sub = Z.entries[np.ix_(keep, keep)] / (1.0 - mass)[:, None]
            slack = _slack_cube(sub, growth[np.ix_(keep, keep)])
            for i, j, col, s in _collect_violations(slack, tolerance, keep):
                key = (i, j, col)
                if s > worst.get(key, -math.inf):
                    worst[key] = s
    violations = tuple(
        (i, j, col, worst[(i, j, col)]) for i, j, col in sorted(worst)
    )
    return GeoIndReport(epsilon=epsilon, tolerance=tolerance, violations=violations)


def utility_error(tree: LocationTree, real: str, obf: str, target: str) -> float:
    """|d(real, target) - d(obf, target)| on centroids.

    real and obf must share a level; the target may sit at any level, so
    reduced-precision reports remain comparable.
    """
    if tree.nodes[real].level != tree.nodes[obf].level:
        raise LevelMismatchError(
            f"{real!r} and {obf!r} are at different levels"
        )
    return abs(
        centroid_distance(tree, real, target) - centroid_distance(tree, obf, target)
    )


def expected_loss(
    Z: ObfuscationMatrix,
    tree: LocationTree,
    priors,
    targets,
) -> float:
    """Prior-weighted expected distance estimation error against targets.

    priors may be a mapping over Z.node_ids or an aligned vector; it is
    renormalized to the matrix's node set. Multiple targets average.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("target set is empty")
    p = as_prior_vector(priors, Z.node_ids)
    d_to = np.array(
        [
            [centroid_distance(tree, nid, t) for nid in Z.node_ids]
            for t in targets
        ]
    )  # (Q, K)
    total = 0.0
    for q in range(len(targets)):
        u = np.abs(d_to[q][:, None] - d_to[q][None, :])
        total += float(p @ (Z.entries * u).sum(axis=1))
    return total / len(targets)


def as_prior_vector(priors, node_ids) -> np.ndarray:
    """Normalize a prior mapping/vector onto an ordered node list."""
    if priors is None:
        raise ValueError("priors are required")
    if isinstance(priors, dict):
        missing = [nid for nid in node_ids if nid not in priors]
        if missing:
            raise ValueError(f"priors missing for {missing}")
        vec = np.array([float(priors[nid]) for nid in node_ids])
    else:
        vec = np.asarray(priors, dtype=float)
        if vec.shape != (len(node_ids),):
            raise ValueError(
                f"prior vector shape {vec.shape} does not match {len(node_ids)} nodes"
            )
    if np.any(vec < 0) or not np.all(np.isfinite(vec)):
        raise ValueError("priors must be finite and non-negative")
    s = vec.sum()
    if s <= 0:
        raise ValueError("priors sum to zero")
    return vec / s


def tree_priors(tree: LocationTree, node_ids) -> np.ndarray:
    """Renormalized tree priors over an ordered node subset."""
    return as_prior_vector({nid: tree.nodes[nid].prior for nid in node_ids}, node_ids)


# ---------------------------------------------------------------------------
# serialization


def matrix_to_json(Z: ObfuscationMatrix) -> str:
    """Canonical serialization with full double precision."""
    payload = {
        "format": MATRIX_FORMAT,
        "version": MATRIX_FORMAT_VERSION,
        "level": Z.level,
        "node_ids": list(Z.node_ids),
        "rows": [[float(v) for v in row] for row in Z.entries],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def matrix_from_json(text: str) -> ObfuscationMatrix:
    payload = json.loads(text)
    if payload.get("format") != MATRIX_FORMAT:
        raise MatrixError(f"not a matrix document: {payload.get('format')!r}")
    if payload.get("version") != MATRIX_FORMAT_VERSION:
        raise MatrixError(f"unsupported matrix version {payload.get('version')!r}")
    return ObfuscationMatrix(
        level=payload["level"],
        node_ids=tuple(payload["node_ids"]),
        entries=np.array(payload["rows"], dtype=float),
    )
