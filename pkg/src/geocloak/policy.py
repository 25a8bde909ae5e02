"""User-side customization: policies, matrix pruning, precision reduction.

A policy is (privacy_level, precision_level, preferences). Preferences
are conjunctive predicates on acceptable reported locations; a leaf that
fails any predicate enters the prune set. Pruning removes those rows and
columns and renormalizes each surviving row by its surviving mass.
Precision reduction aggregates a matrix to a coarser level by
prior-weighted averaging of rows and summing of columns within each
ancestor group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import MatrixError, PolicyError, PruningInfeasibleError
from .geoind import ObfuscationMatrix
from .tree import LocationTree, ancestor_at, distance

POLICY_FORMAT_VERSION = 1

_OP_ALIASES = {
    "=": "=",
    "==": "=",
    "!=": "!=",
    "≠": "!=",
    "<": "<",
    ">": ">",
    ">=": ">=",
    "≥": ">=",
    "<=": "<=",
    "≤": "<=",
}
_EQUALITY_OPS = ("=", "!=")


@dataclass(frozen=True)
class Predicate:
    """<var, op, val> requirement on an acceptable reported location.

    var names a node attribute, or the builtin ``distance`` which is the
    distance from the candidate leaf to the user's real location.
    """

    var: str
    op: str
    val: object

    def __post_init__(self):
        op = _OP_ALIASES.get(self.op)
        if op is None:
            raise PolicyError(f"unknown operator {self.op!r}")
        object.__setattr__(self, "op", op)

    def holds(self, value) -> bool:
        if isinstance(value, bool) or isinstance(self.val, bool):
            if self.op not in _EQUALITY_OPS:
                raise PolicyError(
                    f"operator {self.op!r} is invalid for boolean {self.var!r}"
                )
            return (value == self.val) == (self.op == "=")
        if self.op == "=":
            return value == self.val
        if self.op == "!=":
            return value != self.val
        try:
            if self.op == "<":
                return value < self.val
            if self.op == ">":
                return value > self.val
            if self.op == "<=":
                return value <= self.val
            return value >= self.val
        except TypeError:
            raise PolicyError(
                f"cannot compare {self.var!r} value {value!r} with {self.val!r}"
            ) from None


@dataclass(frozen=True)
class Policy:
    privacy_level: int
    precision_level: int
    preferences: tuple[Predicate, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "preferences", tuple(self.preferences))


def validate_policy(policy: Policy, tree: LocationTree) -> list[str]:
    """Check level ranges; returns advisory notes (empty when unremarkable)."""
    if not 0 <= policy.privacy_level <= tree.height:
        raise PolicyError(
            f"privacy_level {policy.privacy_level} outside 0..{tree.height}"
        )
    if not 0 <= policy.precision_level <= policy.privacy_level:
        raise PolicyError(
            f"precision_level {policy.precision_level} must be in "
            f"0..privacy_level ({policy.privacy_level})"
        )
    notes = []
    if policy.precision_level == policy.privacy_level and policy.precision_level > 0:
        notes.append(
            "precision_level equals privacy_level: reports collapse to the "
            "subtree root"
        )
    return notes


def policy_to_json(policy: Policy) -> str:
    payload = {
        "version": POLICY_FORMAT_VERSION,
        "privacy_level": policy.privacy_level,
        "precision_level": policy.precision_level,
        "preferences": [
            {"var": p.var, "op": p.op, "val": p.val} for p in policy.preferences
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def policy_from_json(text: str) -> Policy:
    payload = json.loads(text)
    version = payload.get("version", POLICY_FORMAT_VERSION)
    if version != POLICY_FORMAT_VERSION:
        raise PolicyError(f"unsupported policy version {version!r}")
    return Policy(
        privacy_level=payload["privacy_level"],
        precision_level=payload["precision_level"],
        preferences=tuple(
            Predicate(var=p["var"], op=p["op"], val=p["val"])
            for p in payload.get("preferences", ())
        ),
    )


def _attribute_value(tree, leaf_id, real_location, var):
    if var == "distance":
        return distance(tree, leaf_id, real_location)
    attrs = tree.nodes[leaf_id].attributes
    if var not in attrs:
        raise PolicyError(f"node {leaf_id!r} has no attribute {var!r}")
    return attrs[var]


def failure_counts(
    subtree_leaves: Iterable[str],
    tree: LocationTree,
    real_location: str,
    prefs: Iterable[Predicate],
) -> dict[str, int]:
    """Failed-predicate count per leaf (the severity used on overflow)."""
    prefs = tuple(prefs)
    counts = {}
    for leaf in subtree_leaves:
        counts[leaf] = sum(
            0 if p.holds(_attribute_value(tree, leaf, real_location, p.var)) else 1
            for p in prefs
        )
    return counts


def eval_policy(
    subtree_leaves: Iterable[str],
    tree: LocationTree,
    real_location: str,
    prefs: Iterable[Predicate],
) -> tuple[str, ...]:
    """Leaves failing any predicate, sorted; the real location never prunes."""
    leaves = list(subtree_leaves)
    if real_location not in leaves:
        raise PolicyError(f"real location {real_location!r} not in the subtree")
    counts = failure_counts(leaves, tree, real_location, prefs)
    return tuple(sorted(l for l in leaves if counts[l] > 0 and l != real_location))


def prune_matrix(Z: ObfuscationMatrix, prune: Iterable[str]) -> ObfuscationMatrix:
    """Remove the pruned rows and columns and renormalize each row.

    Every surviving entry is divided by its row's surviving mass. If some
    surviving row has pruned mass 1 (within 1e-12) the division is
    undefined and PruningInfeasibleError is raised with the original
    matrix attached, so callers can fall back to keeping it unchanged.
    """
    prune = tuple(prune)
    if not prune:
        return Z
    if len(set(prune)) != len(prune):
        raise MatrixError("duplicate ids in prune set")
    unknown = [nid for nid in prune if nid not in Z.node_ids]
    if unknown:
        raise MatrixError(f"prune ids not bound to the matrix: {unknown}")
    if len(prune) >= Z.k:
        raise MatrixError("cannot prune every location")
    pruned = set(prune)
    keep = [i for i, nid in enumerate(Z.node_ids) if nid not in pruned]
    drop = [i for i, nid in enumerate(Z.node_ids) if nid in pruned]
    mass = Z.entries[keep][:, drop].sum(axis=1)
    stuck = np.nonzero(mass >= 1.0 - 1e-12)[0]
    if len(stuck):
        row_id = Z.node_ids[keep[stuck[0]]]
        raise PruningInfeasibleError(
            f"row {row_id} keeps no probability mass after pruning",
            row_id=row_id,
            original=Z,
        )
    entries = Z.entries[np.ix_(keep, keep)] / (1.0 - mass)[:, None]
    return ObfuscationMatrix(
        level=Z.level,
        node_ids=tuple(Z.node_ids[i] for i in keep),
        entries=entries,
    )


def reduce_precision(
    Z: ObfuscationMatrix, tree: LocationTree, target_level: int
) -> ObfuscationMatrix:
    """Aggregate a matrix to a coarser level by Bayes-weighted averaging.

    With groups N(i) = the matrix's nodes under level-L ancestor i and
    p the tree priors of those nodes,

        z_L[i, j] = sum_{m in N(i)} p[m] * sum_{n in N(j)} z[m, n] / P[i]

    where P[i] = sum of p over N(i). Rows stay unit measure, and the
    constant-budget constraint is preserved whenever the input satisfies
    it. Works on pruned matrices too: groups contain only surviving
    nodes, which renormalizes group priors over survivors.
    """
    if target_level <= Z.level:
        raise ValueError(
            f"target level {target_level} must exceed the matrix level {Z.level}"
        )
    if target_level > tree.height:
        raise ValueError(
            f"target level {target_level} exceeds the tree height {tree.height}"
        )
    ancestors = [ancestor_at(tree, nid, target_level) for nid in Z.node_ids]
    group_ids = tuple(sorted(set(ancestors)))
    index = {gid: g for g, gid in enumerate(group_ids)}
    k, n_groups = Z.k, len(group_ids)

    weights = np.array([tree.nodes[nid].prior for nid in Z.node_ids])
    member = np.zeros((k, n_groups))
    member[np.arange(k), [index[a] for a in ancestors]] = 1.0
    group_mass = member.T @ weights
    if np.any(group_mass <= 0):
        empty = group_ids[int(np.argmin(group_mass))]
        raise MatrixError(f"ancestor {empty} has zero prior mass")
    numerator = (member * weights[:, None]).T @ Z.entries @ member
    entries = numerator / group_mass[:, None]
    return ObfuscationMatrix(level=target_level, node_ids=group_ids, entries=entries)


def reduce_precision_on_pruned(
    Zp: ObfuscationMatrix, tree: LocationTree, target_level: int
) -> ObfuscationMatrix:
    """reduce_precision on a pruned matrix.

    Ancestors whose nodes were all pruned simply produce no group, and
    each group's divisor is the surviving prior mass, which is exactly
    the renormalized-prior aggregation.
    """
    return reduce_precision(Zp, tree, target_level)
