"""Privacy forest generation, exchange format, and the location pipeline.

The server builds one robust leaf-level matrix per subtree root at the
chosen privacy level and ships the whole forest to the user. The user
side evaluates its policy locally, prunes, reduces precision, and
samples; the only values that ever travel to the server are the privacy
level and the prune-set size.
"""

from __future__ import annotations

import json
import random
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ChecksumError,
    ForestError,
    ForestFormatError,
    ForestSynthesisError,
)
from .geoind import GeoIndReport, ObfuscationMatrix, audit_geo_ind
from .policy import (
    Policy,
    eval_policy,
    failure_counts,
    prune_matrix,
    reduce_precision,
    validate_policy,
)
from .synthesis import SynthesisConfig, generate_robust_matrix
from .tree import LocationTree, ancestor_at, find_subtree, nodes_at_level, subtree_leaves, tree_hash

FOREST_FORMAT = "privacy-forest"
FOREST_FORMAT_VERSION = 1

OVERFLOW_ENFORCE_POLICY = "enforce_policy"
OVERFLOW_ENFORCE_PRIVACY = "enforce_privacy"


@dataclass(frozen=True)
class ObfuscationRequest:
    """Everything the server is told: the level and the prune-set size."""

    privacy_level: int
    prune_count: int


@dataclass(frozen=True)
class ObfuscationResult:
    obfuscated: str
    subtree_root: str
    privacy_violation_count: int
    policy_violation_count: int
    rng_seed: int


@dataclass
class PrivacyForest:
    tree_hash: str
    privacy_level: int
    epsilon: float
    delta: int
    entries: dict[str, ObfuscationMatrix]
    manifests: dict[str, dict] = field(default_factory=dict)
    version: int = FOREST_FORMAT_VERSION

    def __eq__(self, other):
        if not isinstance(other, PrivacyForest):
            return NotImplemented
        return (
            self.version == other.version
            and self.tree_hash == other.tree_hash
            and self.privacy_level == other.privacy_level
            and self.epsilon == other.epsilon
            and self.delta == other.delta
            and self.entries == other.entries
            and self.manifests == other.manifests
        )


def generate_privacy_forest(
    tree: LocationTree,
    privacy_level: int,
    config: SynthesisConfig,
    priors=None,
) -> PrivacyForest:
    """One robust matrix per node at ``privacy_level``.

    Degenerate single-leaf subtrees get the trivial 1x1 matrix. Any
    synthesis failure aborts the whole build, naming the subtree root.
    ``priors`` optionally overrides tree priors (mapping over leaf ids).
    """
    if not 1 <= privacy_level <= tree.height:
        raise ForestError(
            f"privacy_level {privacy_level} outside 1..{tree.height}"
        )
    entries: dict[str, ObfuscationMatrix] = {}
    manifests: dict[str, dict] = {}
    for root in nodes_at_level(tree, privacy_level):
        leaves = subtree_leaves(tree, root)
        if len(leaves) == 1:
            entries[root] = ObfuscationMatrix(
                level=0, node_ids=tuple(leaves), entries=np.ones((1, 1))
            )
            manifests[root] = {
                "trivial": True,
                "epsilon": config.epsilon,
                "delta": config.delta,
                "violations": {
                    "epsilon": config.epsilon,
                    "tolerance": 0.0,
                    "count": 0,
                    "audit": "trivial",
                },
            }
            continue
        sub_priors = None
        if priors is not None:
            sub_priors = {nid: priors[nid] for nid in leaves}
        try:
            result = generate_robust_matrix(leaves, tree, sub_priors, config)
        except Exception as exc:
            raise ForestSynthesisError(
                f"synthesis failed for subtree {root}: {exc}", root_id=root
            ) from exc
        entries[root] = result.matrix
        manifests[root] = result.manifest()
    return PrivacyForest(
        tree_hash=tree_hash(tree),
        privacy_level=privacy_level,
        epsilon=config.epsilon,
        delta=config.delta,
        entries=entries,
        manifests=manifests,
    )


def sample_row(row: np.ndarray, node_ids, rng_seed: int) -> str:
    """Inverse-CDF draw from one matrix row, deterministic per seed."""
    rng = random.Random(rng_seed)
    u = rng.random()
    cum = np.cumsum(row)
    cum /= cum[-1]  # guard against 1e-9 scale row-sum round-off
    idx = int(np.searchsorted(cum, u, side="right"))
    return node_ids[min(idx, len(node_ids) - 1)]


def generate_obfuscated_location(
    tree: LocationTree,
    real: str,
    policy: Policy,
    forest: PrivacyForest,
    rng_seed: int,
    overflow: str = OVERFLOW_ENFORCE_POLICY,
) -> ObfuscationResult:
    """User-side pipeline: select subtree, evaluate, prune, reduce, sample.

    When the prune set exceeds the forest's delta, ``overflow`` picks the
    resolution: enforce_policy prunes everything and reports how many
    budget constraints the pruned matrix then violates; enforce_privacy
    prunes only the delta most severe offenders (failed-predicate count
    descending, then id) and reports the rest as policy violations.
    """
    if overflow not in (OVERFLOW_ENFORCE_POLICY, OVERFLOW_ENFORCE_PRIVACY):
        raise ValueError(f"unknown overflow mode {overflow!r}")
    if policy.privacy_level != forest.privacy_level:
        raise ForestError(
            f"policy privacy_level {policy.privacy_level} does not match "
            f"the forest's {forest.privacy_level}"
        )
    validate_policy(policy, tree)
    subtree_root = find_subtree(tree, real, policy.privacy_level)
    entry = forest.entries.get(subtree_root)
    if entry is None:
        raise ForestError(f"forest has no entry for subtree {subtree_root}")

    leaves = list(entry.node_ids)
    prune = eval_policy(leaves, tree, real, policy.preferences)
    policy_violations = 0
    if len(prune) > forest.delta and overflow == OVERFLOW_ENFORCE_PRIVACY:
        severity = failure_counts(prune, tree, real, policy.preferences)
        ranked = sorted(prune, key=lambda nid: (-severity[nid], nid))
        kept = tuple(sorted(ranked[: forest.delta]))
        policy_violations = len(prune) - len(kept)
        prune = kept

    pruned = prune_matrix(entry, prune)
    if prune:
        privacy_violations = audit_geo_ind(tree=tree, Z=pruned, epsilon=forest.epsilon).count
    else:
        # Nothing changed, reuse the synthesis-time audit of this entry.
        manifest = forest.manifests.get(subtree_root, {})
        privacy_violations = manifest.get("violations", {}).get("count", 0)

    if policy.precision_level > 0:
        final = reduce_precision(pruned, tree, policy.precision_level)
        row_node = ancestor_at(tree, real, policy.precision_level)
    else:
        final = pruned
        row_node = real
    row = final.entries[final.row_index(row_node)]
    obfuscated = sample_row(row, final.node_ids, rng_seed)
    return ObfuscationResult(
        obfuscated=obfuscated,
        subtree_root=subtree_root,
        privacy_violation_count=privacy_violations,
        policy_violation_count=policy_violations,
        rng_seed=rng_seed,
    )


class ForestServer:
    """Serves serialized forests, cached per (tree, level, epsilon, delta)."""

    def __init__(
        self,
        tree: LocationTree,
        epsilon: float,
        targets,
        convergence_threshold: float = 5e-3,
        max_iterations: int = 20,
        rpb_mode: str | None = None,
        priors=None,
    ):
        self._tree = tree
        self._tree_hash = tree_hash(tree)
        self._epsilon = epsilon
        self._targets = tuple(targets)
        self._xi = convergence_threshold
        self._max_iterations = max_iterations
        self._rpb_mode = rpb_mode
        self._priors = priors
        self._cache: dict[tuple, bytes] = {}

    def handle_request(self, request: ObfuscationRequest) -> bytes:
        key = (
            self._tree_hash,
            request.privacy_level,
            self._epsilon,
            request.prune_count,
        )
        if key not in self._cache:
            mode = self._rpb_mode
            if mode is None:
                mode = "exact" if request.prune_count <= 5 else "approximate"
            config = SynthesisConfig(
                epsilon=self._epsilon,
                delta=request.prune_count,
                targets=self._targets,
                convergence_threshold=self._xi,
                max_iterations=self._max_iterations,
                rpb_mode=mode,
            )
            forest = generate_privacy_forest(
                self._tree, request.privacy_level, config, priors=self._priors
            )
            self._cache[key] = serialize_forest(forest)
        return self._cache[key]


# ---------------------------------------------------------------------------
# exchange format


def serialize_forest(forest: PrivacyForest) -> bytes:
    """Deterministic framed container: header line + JSON payload + CRC."""
    payload = {
        "tree_hash": forest.tree_hash,
        "privacy_level": forest.privacy_level,
        "epsilon": forest.epsilon,
        "delta": forest.delta,
        "entries": {
            root: {
                "level": m.level,
                "node_ids": list(m.node_ids),
                "rows": [[float(v) for v in row] for row in m.entries],
            }
            for root, m in sorted(forest.entries.items())
        },
        "manifests": {root: forest.manifests.get(root, {}) for root in sorted(forest.entries)},
    }
    body = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")
    header = {
        "format": FOREST_FORMAT,
        "version": forest.version,
        "crc32": zlib.crc32(body),
        "payload_bytes": len(body),
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n" + body


def deserialize_forest(blob: bytes) -> PrivacyForest:
    newline = blob.find(b"\n")
    if newline < 0:
        raise ForestFormatError("missing header line")
    try:
        header = json.loads(blob[:newline])
    except json.JSONDecodeError as exc:
        raise ForestFormatError(f"unreadable header: {exc}") from exc
    if header.get("format") != FOREST_FORMAT:
        raise ForestFormatError(f"not a privacy forest: {header.get('format')!r}")
    if header.get("version") != FOREST_FORMAT_VERSION:
        raise ForestFormatError(f"unsupported version {header.get('version')!r}")
    body = blob[newline + 1 :]
    if len(body) != header.get("payload_bytes"):
        raise ChecksumError(
            f"payload is {len(body)} bytes, header says {header.get('payload_bytes')}"
        )
    if zlib.crc32(body) != header.get("crc32"):
        raise ChecksumError("payload checksum mismatch")
    payload = json.loads(body)
    entries = {
        root: ObfuscationMatrix(
            level=raw["level"],
            node_ids=tuple(raw["node_ids"]),
            entries=np.array(raw["rows"], dtype=float),
        )
        for root, raw in payload["entries"].items()
    }
    return PrivacyForest(
        tree_hash=payload["tree_hash"],
        privacy_level=payload["privacy_level"],
        epsilon=payload["epsilon"],
        delta=payload["delta"],
        entries=entries,
        manifests=payload.get("manifests", {}),
    )
