import math

import pytest

from geocloak.errors import CapacityError, EmptyPriorError, TreeError
from geocloak import tree as tree_mod
from geocloak.tree import (
    AffineMap,
    CheckInRecord,
    TreeConfig,
    ancestor_at,
    build_synthetic_tree,
    distance,
    find_subtree,
    from_json,
    ingest_checkins,
    locate_leaf,
    node_id,
    nodes_at_level,
    parse_id,
    subtree_leaves,
    to_json,
    tree_hash,
    validate_tree,
    with_attributes,
)


def test_ids_round_trip():
    assert parse_id(node_id(2, "013")) == (2, "013")
    assert parse_id("0-07") == (0, "07")


def test_line_tree_geometry(line3):
    ids = line3.levels[0]
    assert ids == ("0-0", "0-1", "0-2")
    assert line3.nodes["0-0"].centroid == (0.5, 0.5)
    assert distance(line3, "0-0", "0-1") == pytest.approx(1.0)
    assert distance(line3, "0-0", "0-2") == pytest.approx(2.0)


def test_grid_tree_structure(grid4):
    assert grid4.height == 2
    assert len(grid4.levels[0]) == 4
    assert len(grid4.levels[1]) == 2
    assert grid4.levels[2] == (grid4.root,)
    for nid in grid4.levels[0]:
        assert grid4.nodes[nid].prior == pytest.approx(0.25)
    # internal priors aggregate children
    for nid in grid4.levels[1]:
        kids = grid4.nodes[nid].children
        assert grid4.nodes[nid].prior == pytest.approx(
            sum(grid4.nodes[c].prior for c in kids)
        )
    validate_tree(grid4)


def test_ancestors_and_subtrees(grid4):
    leaf = grid4.levels[0][0]
    mid = ancestor_at(grid4, leaf, 1)
    assert grid4.nodes[mid].level == 1
    assert leaf in subtree_leaves(grid4, mid)
    assert find_subtree(grid4, leaf, 1) == mid
    assert sorted(subtree_leaves(grid4, grid4.root)) == list(grid4.levels[0])
    assert nodes_at_level(grid4, 1) == list(grid4.levels[1])


def test_bad_configs_rejected():
    with pytest.raises(TreeError):
        build_synthetic_tree(TreeConfig(branching=1, height=1))
    with pytest.raises(TreeError):
        build_synthetic_tree(TreeConfig(branching=2, height=0))
    with pytest.raises(TreeError):
        build_synthetic_tree(TreeConfig(branching=2, height=2, cell_size=0.0))
    with pytest.raises(CapacityError):
        build_synthetic_tree(TreeConfig(branching=2, height=20, max_leaves=1024))


def test_locate_leaf(grid4):
    assert locate_leaf(grid4, 0.5, 0.5) == "0-00"
    assert locate_leaf(grid4, 1.5, 1.5) == "0-11"
    assert locate_leaf(grid4, -1.0, 0.5) is None
    assert locate_leaf(grid4, float("nan"), 0.5) is None


def test_ingest_checkins_drops_empty_leaves(grid4):
    # lon maps to x and lat to y; counts 3,1,0,0 over the four leaves
    # leave two survivors at priors 0.75/0.25
    recs = [
        CheckInRecord(user="u", timestamp="2024-01-01T00:00:00", lat=0.5, lon=0.5, location_id="a"),
        CheckInRecord(user="u", timestamp="2024-01-01T00:00:01", lat=0.5, lon=0.5, location_id="a"),
        CheckInRecord(user="v", timestamp="2024-01-01T00:00:02", lat=0.5, lon=0.5, location_id="a"),
        CheckInRecord(user="w", timestamp="2024-01-01T00:00:03", lat=1.5, lon=0.5, location_id="b"),
    ]
    pruned = ingest_checkins(grid4, recs)
    leaves = pruned.levels[0]
    assert leaves == ("0-00", "0-01")
    assert pruned.nodes["0-00"].prior == pytest.approx(0.75)
    assert pruned.nodes["0-01"].prior == pytest.approx(0.25)
    validate_tree(pruned)


def test_ingest_all_out_of_region(grid4):
    recs = [
        CheckInRecord(user="u", timestamp="t", lat=99.0, lon=99.0, location_id="x")
    ]
    with pytest.raises(EmptyPriorError):
        ingest_checkins(grid4, recs)


def test_affine_map_applies():
    m = AffineMap(x_scale=2.0, x_offset=-1.0, y_scale=2.0, y_offset=-1.0)
    # lon drives x, lat drives y
    assert m.apply(1.0, 2.0) == (3.0, 1.0)


def test_serialization_round_trip(grid9):
    text = to_json(grid9)
    clone = from_json(text)
    assert to_json(clone) == text
    assert tree_hash(clone) == tree_hash(grid9)
    assert clone.levels == grid9.levels


def test_hash_differs_on_content(grid9, grid4):
    assert tree_hash(grid9) != tree_hash(grid4)


def test_with_attributes(grid4):
    t2 = with_attributes(grid4, {"0-00": {"indoor": True}})
    assert t2.nodes["0-00"].attributes["indoor"] is True
    assert grid4.nodes["0-00"].attributes == {}
    with pytest.raises(TreeError):
        with_attributes(grid4, {"0-99": {"x": 1}})


def test_hop_metric():
    t = build_synthetic_tree(
        TreeConfig(branching=2, height=2, cell_size=1.0, distance_metric="hop")
    )
    a, b = t.levels[0][0], t.levels[0][3]
    # hop distance is Manhattan on centroids
    ax, ay = t.nodes[a].centroid
    bx, by = t.nodes[b].centroid
    assert distance(t, a, b) == pytest.approx(abs(ax - bx) + abs(ay - by))


def test_read_checkin_csv(tmp_path):
    p = tmp_path / "checkins.csv"
    p.write_text(
        "user,timestamp,lat,lon,location_id\n"
        "u1,2024-01-01T00:00:00,0.5,0.5,aa\n"
        "u2,2024-01-01T00:00:01,1.5,0.5,bb\n"
    )
    recs = tree_mod.read_checkin_csv(str(p))
    assert len(recs) == 2
    assert recs[0].user == "u1"
    assert recs[1].lat == pytest.approx(1.5)
