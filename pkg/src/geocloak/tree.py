"""Hierarchical location tree over a rectangular region.

The tree is a balanced k-ary partition of the region into rectangular
cells. Level H holds the root, level 0 the finest cells, and the
children of every node tile its rectangle exactly. Node ids encode the
level and the grid path, so rebuilds with the same config produce
identical ids and lexicographic id order within a level equals row-major
grid order.

Leaf priors default to uniform and can be replaced by ingesting check-in
records; leaves that receive no check-ins are dropped from the tree so
every surviving prior is strictly positive.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import (
    CapacityError,
    EmptyPriorError,
    LevelMismatchError,
    TreeError,
)

ID_SEP = "-"
TREE_FORMAT = "location-tree"
TREE_FORMAT_VERSION = 1

_METRICS = ("euclidean", "hop")


@dataclass(frozen=True)
class TreeConfig:
    """Parameters of a synthetic grid hierarchy."""

    branching: int
    height: int
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    distance_metric: str = "euclidean"
    max_leaves: int = 65536


@dataclass(frozen=True)
class TreeNode:
    id: str
    level: int
    centroid: tuple[float, float]
    children: tuple[str, ...]
    prior: float
    parent: str | None = None
    attributes: Mapping[str, object] = field(default_factory=dict)


@dataclass(frozen=True)
class LocationTree:
    """Immutable balanced location hierarchy.

    ``levels[l]`` lists the node ids at level l in lexicographic order,
    which on synthetic trees is row-major grid order.
    """

    root: str
    nodes: Mapping[str, TreeNode]
    height: int
    levels: tuple[tuple[str, ...], ...]
    distance_metric: str = "euclidean"
    config: TreeConfig | None = None
    bounds: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class CheckInRecord:
    user: str
    timestamp: str
    lat: float
    lon: float
    location_id: str = ""


@dataclass(frozen=True)
class AffineMap:
    """Affine lat/lon to region-local (x, y) mapping.

    The default is the identity with lon on x and lat on y, which is what
    the synthetic generators emit.
    """

    x_scale: float = 1.0
    x_offset: float = 0.0
    y_scale: float = 1.0
    y_offset: float = 0.0

    def apply(self, lat: float, lon: float) -> tuple[float, float]:
        return (
            self.x_scale * lon + self.x_offset,
            self.y_scale * lat + self.y_offset,
        )


def _digit_width(branching: int) -> int:
    return len(str(branching - 1))


def _splits(branching: int, height: int) -> list[tuple[int, int]]:
    """Per-depth (columns, rows) subdivision of a cell into children.

    Perfect-square branching splits both axes evenly; otherwise the split
    axis alternates by depth so leaves still land on a regular grid.
    """
    r = math.isqrt(branching)
    if r * r == branching:
        return [(r, r)] * height
    return [(branching, 1) if d % 2 == 0 else (1, branching) for d in range(height)]


def _grid_shape(splits: list[tuple[int, int]]) -> tuple[int, int]:
    nx = ny = 1
    for rx, ry in splits:
        nx *= rx
        ny *= ry
    return nx, ny


def node_id(level: int, path: str) -> str:
    return f"{level}{ID_SEP}{path}"


def parse_id(nid: str) -> tuple[int, str]:
    level_text, _, path = nid.partition(ID_SEP)
    return int(level_text), path


def build_synthetic_tree(
    config: TreeConfig,
    attributes: Mapping[str, Mapping[str, object]] | None = None,
) -> LocationTree:
    """Build the deterministic grid hierarchy described by ``config``.

    Leaf priors start uniform. ``attributes`` optionally attaches an
    attribute map to named nodes (for policy predicates).
    """
    if config.branching < 2:
        raise TreeError(f"branching must be >= 2, got {config.branching}")
    if config.height < 1:
        raise TreeError(f"height must be >= 1, got {config.height}")
    if config.cell_size <= 0:
        raise TreeError(f"cell_size must be positive, got {config.cell_size}")
    if config.distance_metric not in _METRICS:
        raise TreeError(f"unknown distance metric {config.distance_metric!r}")
    n_leaves = config.branching**config.height
    if n_leaves > config.max_leaves:
        raise CapacityError(
            f"{n_leaves} leaves exceed the cap of {config.max_leaves}"
        )

    attributes = attributes or {}
    width = _digit_width(config.branching)
    splits = _splits(config.branching, config.height)
    nx, ny = _grid_shape(splits)
    ox, oy = config.origin
    cs = config.cell_size
    leaf_prior = 1.0 / n_leaves
    nodes: dict[str, TreeNode] = {}

    def rec(level, path, gx0, gy0, gx1, gy1, parent):
        # Grid extents are tracked as integers in cell units; float
        # centroids stay exact multiples of cell_size / 2.
        nid = node_id(level, path)
        centroid = (ox + cs * (gx0 + gx1) / 2.0, oy + cs * (gy0 + gy1) / 2.0)
        if level == 0:
            nodes[nid] = TreeNode(
                id=nid,
                level=0,
                centroid=centroid,
                children=(),
                prior=leaf_prior,
                parent=parent,
                attributes=dict(attributes.get(nid, {})),
            )
            return leaf_prior
        rx, ry = splits[config.height - level]
        sx = (gx1 - gx0) // rx
        sy = (gy1 - gy0) // ry
        child_ids = []
        prior = 0.0
        for iy in range(ry):
            for ix in range(rx):
                idx = iy * rx + ix
                cid_path = path + f"{idx:0{width}d}"
                child_ids.append(node_id(level - 1, cid_path))
                prior += rec(
                    level - 1,
                    cid_path,
                    gx0 + ix * sx,
                    gy0 + iy * sy,
                    gx0 + (ix + 1) * sx,
                    gy0 + (iy + 1) * sy,
                    nid,
                )
        nodes[nid] = TreeNode(
            id=nid,
            level=level,
            centroid=centroid,
            children=tuple(child_ids),
            prior=prior,
            parent=parent,
            attributes=dict(attributes.get(nid, {})),
        )
        return prior

    rec(config.height, "", 0, 0, nx, ny, None)
    unknown = set(attributes) - set(nodes)
    if unknown:
        raise TreeError(f"attributes reference unknown nodes: {sorted(unknown)}")
    tree = LocationTree(
        root=node_id(config.height, ""),
        nodes=nodes,
        height=config.height,
        levels=_levels_of(nodes, config.height),
        distance_metric=config.distance_metric,
        config=config,
        bounds=(ox, oy, ox + nx * cs, oy + ny * cs),
    )
    validate_tree(tree)
    return tree


def _levels_of(nodes: Mapping[str, TreeNode], height: int) -> tuple[tuple[str, ...], ...]:
    buckets: list[list[str]] = [[] for _ in range(height + 1)]
    for nid, node in nodes.items():
        if not 0 <= node.level <= height:
            raise TreeError(f"node {nid} level {node.level} outside 0..{height}")
        buckets[node.level].append(nid)
    return tuple(tuple(sorted(b)) for b in buckets)


def with_attributes(
    tree: LocationTree, attributes: Mapping[str, Mapping[str, object]]
) -> LocationTree:
    """Return a copy of the tree with attribute maps merged onto nodes."""
    unknown = set(attributes) - set(tree.nodes)
    if unknown:
        raise TreeError(f"attributes reference unknown nodes: {sorted(unknown)}")
    nodes = dict(tree.nodes)
    for nid, attrs in attributes.items():
        node = nodes[nid]
        merged = dict(node.attributes)
        merged.update(attrs)
        nodes[nid] = TreeNode(
            id=node.id,
            level=node.level,
            centroid=node.centroid,
            children=node.children,
            prior=node.prior,
            parent=node.parent,
            attributes=merged,
        )
    return LocationTree(
        root=tree.root,
        nodes=nodes,
        height=tree.height,
        levels=tree.levels,
        distance_metric=tree.distance_metric,
        config=tree.config,
        bounds=tree.bounds,
    )


def nodes_at_level(tree: LocationTree, level: int) -> list[str]:
    """Node ids at one level, lexicographically ordered."""
    if not 0 <= level <= tree.height:
        raise LevelMismatchError(
            f"level {level} outside 0..{tree.height}"
        )
    return list(tree.levels[level])


def find_subtree(tree: LocationTree, leaf: str, level: int) -> str:
    """Ancestor of ``leaf`` at ``level`` (the leaf itself for level 0)."""
    node = tree.nodes.get(leaf)
    if node is None:
        raise TreeError(f"unknown node {leaf!r}")
    if node.level != 0:
        raise TreeError(f"{leaf!r} is not a leaf (level {node.level})")
    if not 0 <= level <= tree.height:
        raise LevelMismatchError(f"level {level} outside 0..{tree.height}")
    while node.level < level:
        node = tree.nodes[node.parent]
    return node.id


def ancestor_at(tree: LocationTree, nid: str, level: int) -> str:
    """Ancestor of any node at ``level`` >= the node's own level."""
    node = tree.nodes.get(nid)
    if node is None:
        raise TreeError(f"unknown node {nid!r}")
    if level < node.level or level > tree.height:
        raise LevelMismatchError(
            f"level {level} not in {node.level}..{tree.height}"
        )
    while node.level < level:
        node = tree.nodes[node.parent]
    return node.id


def subtree_leaves(tree: LocationTree, root_id: str) -> list[str]:
    """Leaf ids under ``root_id``, lexicographically ordered."""
    node = tree.nodes.get(root_id)
    if node is None:
        raise TreeError(f"unknown node {root_id!r}")
    leaves = []
    stack = [node]
    while stack:
        cur = stack.pop()
        if cur.level == 0:
            leaves.append(cur.id)
        else:
            stack.extend(tree.nodes[c] for c in cur.children)
    return sorted(leaves)


def centroid_distance(
    tree: LocationTree, a: str, b: str, metric: str | None = None
) -> float:
    """Distance between two node centroids, any levels.

    hop distance is the Manhattan centroid distance, which on the
    synthetic grid equals grid hops times cell_size.
    """
    metric = metric or tree.distance_metric
    na, nb = tree.nodes.get(a), tree.nodes.get(b)
    if na is None or nb is None:
        raise TreeError(f"unknown node {a!r}" if na is None else f"unknown node {b!r}")
    dx = na.centroid[0] - nb.centroid[0]
    dy = na.centroid[1] - nb.centroid[1]
    if metric == "euclidean":
        return math.hypot(dx, dy)
    if metric == "hop":
        return abs(dx) + abs(dy)
    raise TreeError(f"unknown distance metric {metric!r}")


def distance(tree: LocationTree, a: str, b: str) -> float:
    """Distance between two same-level nodes under the tree's metric."""
    na, nb = tree.nodes.get(a), tree.nodes.get(b)
    if na is None or nb is None:
        raise TreeError(f"unknown node {a!r}" if na is None else f"unknown node {b!r}")
    if na.level != nb.level:
        raise LevelMismatchError(
            f"{a!r} at level {na.level} vs {b!r} at level {nb.level}"
        )
    return centroid_distance(tree, a, b)


def validate_tree(tree: LocationTree) -> None:
    """Check structural invariants, raising TreeError on the first failure.

    Verifies the level index, parent/child consistency, balance (leaves
    exactly at level 0, children one level down), prior aggregation
    within 1e-12 per node, and leaf priors summing to 1 within 1e-9.
    """
    if tree.root not in tree.nodes:
        raise TreeError(f"root {tree.root!r} missing from node map")
    if len(tree.levels) != tree.height + 1:
        raise TreeError("level index does not match height")
    root = tree.nodes[tree.root]
    if root.level != tree.height or root.parent is not None:
        raise TreeError("root must sit at the top level with no parent")

    seen = 0
    for level, ids in enumerate(tree.levels):
        for nid in ids:
            node = tree.nodes.get(nid)
            if node is None:
                raise TreeError(f"level index references unknown node {nid!r}")
            if node.level != level:
                raise TreeError(f"{nid!r} indexed at level {level} but says {node.level}")
            seen += 1
    if seen != len(tree.nodes):
        raise TreeError("level index does not cover every node exactly once")

    for nid, node in tree.nodes.items():
        if node.id != nid:
            raise TreeError(f"node map key {nid!r} does not match id {node.id!r}")
        if (node.level == 0) != (len(node.children) == 0):
            raise TreeError(f"{nid!r}: children empty iff level 0 violated")
        if not 0.0 <= node.prior <= 1.0 + 1e-12:
            raise TreeError(f"{nid!r}: prior {node.prior} outside [0, 1]")
        if nid != tree.root:
            parent = tree.nodes.get(node.parent or "")
            if parent is None or nid not in parent.children:
                raise TreeError(f"{nid!r}: parent link broken")
        for cid in node.children:
            child = tree.nodes.get(cid)
            if child is None:
                raise TreeError(f"{nid!r}: unknown child {cid!r}")
            if child.level != node.level - 1:
                raise TreeError(f"{nid!r}: child {cid!r} skips a level")
            if child.parent != nid:
                raise TreeError(f"{cid!r}: parent pointer does not match {nid!r}")
        if node.children:
            agg = sum(tree.nodes[c].prior for c in node.children)
            if abs(agg - node.prior) > 1e-12:
                raise TreeError(
                    f"{nid!r}: prior {node.prior} != children sum {agg}"
                )

    leaf_sum = sum(tree.nodes[nid].prior for nid in tree.levels[0])
    if abs(leaf_sum - 1.0) > 1e-9:
        raise TreeError(f"leaf priors sum to {leaf_sum}, not 1")


# ---------------------------------------------------------------------------
# check-in ingestion


def read_checkin_csv(source) -> list[CheckInRecord]:
    """Parse check-in rows ``user,checkin_time,latitude,longitude,location_id``.

    ``source`` is a path or an iterable of lines. A header row is
    detected by a non-numeric latitude field and skipped.
    """
    if isinstance(source, (str, bytes)):
        with open(source, newline="") as fh:
            return _parse_checkin_rows(csv.reader(fh))
    return _parse_checkin_rows(csv.reader(source))


def _parse_checkin_rows(rows) -> list[CheckInRecord]:
    records = []
    for i, row in enumerate(rows):
        if not row:
            continue
        if len(row) < 4:
            raise ValueError(f"check-in row {i} has {len(row)} fields, expected >= 4")
        try:
            lat, lon = float(row[2]), float(row[3])
        except ValueError:
            if i == 0:
                continue  # header row
            raise ValueError(f"check-in row {i} has non-numeric coordinates") from None
        records.append(
            CheckInRecord(
                user=row[0],
                timestamp=row[1],
                lat=lat,
                lon=lon,
                location_id=row[4] if len(row) > 4 else "",
            )
        )
    return records


def locate_leaf(
    tree: LocationTree, x: float, y: float
) -> str | None:
    """Leaf cell containing region point (x, y), or None if out of region."""
    if not (math.isfinite(x) and math.isfinite(y)):
        return None
    x0, y0, x1, y1 = tree.bounds
    if not (x0 <= x <= x1 and y0 <= y <= y1):
        return None
    if tree.config is not None:
        cfg = tree.config
        splits = _splits(cfg.branching, cfg.height)
        nx, ny = _grid_shape(splits)
        ix = min(int((x - x0) / cfg.cell_size), nx - 1)
        iy = min(int((y - y0) / cfg.cell_size), ny - 1)
        width = _digit_width(cfg.branching)
        digits = []
        cx, cy = nx, ny
        for rx, ry in splits:
            sx, sy = cx // rx, cy // ry
            jx, jy = ix // sx, iy // sy
            digits.append(f"{jy * rx + jx:0{width}d}")
            ix, iy, cx, cy = ix - jx * sx, iy - jy * sy, sx, sy
        nid = node_id(0, "".join(digits))
        return nid if nid in tree.nodes else None
    # Generic trees fall back to the nearest leaf centroid; leaf cells of
    # grid trees are squares, so this agrees with containment there.
    best = None
    best_d = math.inf
    for nid in tree.levels[0]:
        cx, cy = tree.nodes[nid].centroid
        d = math.hypot(x - cx, y - cy)
        if d < best_d or (d == best_d and (best is None or nid < best)):
            best, best_d = nid, d
    return best


def count_checkins(
    tree: LocationTree,
    records: Iterable[CheckInRecord],
    mapping: AffineMap | None = None,
) -> tuple[Counter, int]:
    """Per-leaf check-in counts and the number of skipped records."""
    mapping = mapping or AffineMap()
    counts: Counter = Counter()
    skipped = 0
    for rec in records:
        x, y = mapping.apply(rec.lat, rec.lon)
        leaf = locate_leaf(tree, x, y)
        if leaf is None:
            skipped += 1
        else:
            counts[leaf] += 1
    return counts, skipped


def ingest_checkins(
    tree: LocationTree,
    records: Iterable[CheckInRecord],
    mapping: AffineMap | None = None,
) -> LocationTree:
    """Re-derive leaf priors from check-in counts.

    Leaf prior becomes count / total over in-region records. Leaves with
    zero check-ins are removed, along with any internal node left
    childless, so every surviving prior is positive. Raises
    EmptyPriorError when no record falls inside the region.
    """
    counts, skipped = count_checkins(tree, records, mapping)
    total = sum(counts.values())
    if total == 0:
        raise EmptyPriorError(
            f"no in-region check-ins ({skipped} records skipped)"
        )

    survivors = set(counts)
    # Internal nodes survive iff any child survives.
    for level in range(1, tree.height + 1):
        for nid in tree.levels[level]:
            if any(c in survivors for c in tree.nodes[nid].children):
                survivors.add(nid)
    if tree.root not in survivors:
        raise EmptyPriorError("no surviving leaves under the root")

    nodes: dict[str, TreeNode] = {}
    for nid in tree.levels[0]:
        if nid not in survivors:
            continue
        old = tree.nodes[nid]
        nodes[nid] = TreeNode(
            id=nid,
            level=0,
            centroid=old.centroid,
            children=(),
            prior=counts[nid] / total,
            parent=old.parent,
            attributes=old.attributes,
        )
    for level in range(1, tree.height + 1):
        for nid in tree.levels[level]:
            if nid not in survivors:
                continue
            old = tree.nodes[nid]
            kept = tuple(c for c in old.children if c in survivors)
            nodes[nid] = TreeNode(
                id=nid,
                level=level,
                centroid=old.centroid,
                children=kept,
                prior=sum(nodes[c].prior for c in kept),
                parent=old.parent,
                attributes=old.attributes,
            )

    out = LocationTree(
        root=tree.root,
        nodes=nodes,
        height=tree.height,
        levels=_levels_of(nodes, tree.height),
        distance_metric=tree.distance_metric,
        config=tree.config,
        bounds=tree.bounds,
    )
    validate_tree(out)
    return out


# ---------------------------------------------------------------------------
# serialization


def to_json(tree: LocationTree) -> str:
    """Canonical serialization; byte-identical for identical trees."""
    cfg = None
    if tree.config is not None:
        c = tree.config
        cfg = {
            "branching": c.branching,
            "height": c.height,
            "cell_size": c.cell_size,
            "origin": list(c.origin),
            "distance_metric": c.distance_metric,
            "max_leaves": c.max_leaves,
        }
    payload = {
        "format": TREE_FORMAT,
        "version": TREE_FORMAT_VERSION,
        "config": cfg,
        "height": tree.height,
        "root": tree.root,
        "distance_metric": tree.distance_metric,
        "bounds": list(tree.bounds),
        "nodes": [
            {
                "id": n.id,
                "level": n.level,
                "centroid": list(n.centroid),
                "parent": n.parent,
                "prior": n.prior,
                "attributes": dict(n.attributes),
            }
            for n in (tree.nodes[nid] for nid in sorted(tree.nodes))
        ],
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def from_json(text: str) -> LocationTree:
    """Inverse of to_json; accepts externally built hierarchies too."""
    payload = json.loads(text)
    if payload.get("format") != TREE_FORMAT:
        raise TreeError(f"not a location tree document: {payload.get('format')!r}")
    if payload.get("version") != TREE_FORMAT_VERSION:
        raise TreeError(f"unsupported tree version {payload.get('version')!r}")
    cfg = None
    if payload.get("config") is not None:
        c = payload["config"]
        cfg = TreeConfig(
            branching=c["branching"],
            height=c["height"],
            cell_size=c["cell_size"],
            origin=tuple(c["origin"]),
            distance_metric=c["distance_metric"],
            max_leaves=c.get("max_leaves", 65536),
        )
    height = payload["height"]
    children: dict[str, list[str]] = {}
    for raw in payload["nodes"]:
        parent = raw["parent"]
        if parent is not None:
            children.setdefault(parent, []).append(raw["id"])
    nodes = {}
    for raw in payload["nodes"]:
        nodes[raw["id"]] = TreeNode(
            id=raw["id"],
            level=raw["level"],
            centroid=tuple(raw["centroid"]),
            children=tuple(sorted(children.get(raw["id"], ()))),
            prior=raw["prior"],
            parent=raw["parent"],
            attributes=dict(raw.get("attributes", {})),
        )
    tree = LocationTree(
        root=payload["root"],
        nodes=nodes,
        height=height,
        levels=_levels_of(nodes, height),
        distance_metric=payload["distance_metric"],
        config=cfg,
        bounds=tuple(payload["bounds"]),
    )
    validate_tree(tree)
    return tree


def tree_hash(tree: LocationTree) -> str:
    """Stable content hash of the canonical serialization."""
    return hashlib.sha256(to_json(tree).encode("utf-8")).hexdigest()
