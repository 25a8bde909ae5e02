import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from geocloak.errors import MatrixError, PolicyError, PruningInfeasibleError
from geocloak.geoind import (
    ObfuscationMatrix,
    audit_constant_budget,
    constant_budget_of,
)
from geocloak.policy import (
    Policy,
    Predicate,
    eval_policy,
    failure_counts,
    policy_from_json,
    policy_to_json,
    prune_matrix,
    reduce_precision,
    validate_policy,
)
from geocloak.tree import TreeConfig, build_synthetic_tree, with_attributes


def test_predicate_op_aliases():
    assert Predicate("noise", "==", 3).op == "="
    assert Predicate("noise", "≥", 3).op == ">="
    with pytest.raises(PolicyError):
        Predicate("noise", "~", 3)


def test_predicate_holds():
    assert Predicate("noise", "<", 5).holds(3)
    assert not Predicate("noise", "<", 5).holds(7)
    assert Predicate("kind", "!=", "bar").holds("cafe")
    with pytest.raises(PolicyError):
        Predicate("noise", "<", 5).holds("loud")


def test_boolean_predicates_only_equality():
    assert Predicate("open", "=", True).holds(True)
    assert Predicate("open", "!=", True).holds(False)
    with pytest.raises(PolicyError):
        Predicate("open", "<", True).holds(False)


def test_policy_validation(grid4):
    validate_policy(Policy(privacy_level=2, precision_level=1), grid4)
    notes = validate_policy(Policy(privacy_level=1, precision_level=1), grid4)
    assert notes  # collapse warning
    with pytest.raises(PolicyError):
        validate_policy(Policy(privacy_level=9, precision_level=0), grid4)
    with pytest.raises(PolicyError):
        validate_policy(Policy(privacy_level=1, precision_level=2), grid4)


def test_policy_json_round_trip():
    policy = Policy(
        privacy_level=2,
        precision_level=1,
        preferences=(Predicate("kind", "≠", "bar"), Predicate("distance", "<=", 2.0)),
    )
    clone = policy_from_json(policy_to_json(policy))
    assert clone == policy
    assert clone.preferences[0].op == "!="
    # payload is plain json
    json.loads(policy_to_json(policy))


def attr_tree(line3):
    return with_attributes(
        line3,
        {
            "0-0": {"kind": "cafe", "open": True},
            "0-1": {"kind": "bar", "open": True},
            "0-2": {"kind": "bar", "open": False},
        },
    )


def test_eval_policy_prunes_failures(line3):
    tree = attr_tree(line3)
    prefs = (Predicate("kind", "!=", "bar"),)
    assert eval_policy(tree.levels[0], tree, "0-0", prefs) == ("0-1", "0-2")


def test_eval_policy_never_prunes_real_location(line3):
    tree = attr_tree(line3)
    prefs = (Predicate("kind", "!=", "bar"),)
    # the real location fails the predicate but must stay
    assert eval_policy(tree.levels[0], tree, "0-1", prefs) == ("0-2",)
    counts = failure_counts(tree.levels[0], tree, "0-1", prefs)
    assert counts["0-1"] == 1


def test_eval_policy_distance_builtin(line3):
    prefs = (Predicate("distance", "<=", 1.0),)
    assert eval_policy(line3.levels[0], line3, "0-0", prefs) == ("0-2",)


def test_eval_policy_unknown_real(line3):
    with pytest.raises(PolicyError):
        eval_policy(line3.levels[0], line3, "9-9", ())


def test_prune_oracle(oracle_matrix):
    pruned = prune_matrix(oracle_matrix, ["0-2"])
    assert pruned.node_ids == ("0-0", "0-1")
    assert pruned.entries[0] == pytest.approx([0.625, 0.375])
    assert pruned.entries[1] == pytest.approx([0.4, 0.6])


def test_prune_empty_set_is_identity(oracle_matrix):
    assert prune_matrix(oracle_matrix, []) is oracle_matrix


def test_prune_errors(oracle_matrix):
    with pytest.raises(MatrixError):
        prune_matrix(oracle_matrix, ["0-1", "0-1"])
    with pytest.raises(MatrixError):
        prune_matrix(oracle_matrix, ["9-9"])
    with pytest.raises(MatrixError):
        prune_matrix(oracle_matrix, ["0-0", "0-1", "0-2"])


def test_prune_infeasible_mass(line3):
    Z = ObfuscationMatrix(
        level=0,
        node_ids=line3.levels[0],
        entries=np.array([[0.5, 0.5, 0.0], [0.0, 0.0, 1.0], [0.2, 0.3, 0.5]]),
    )
    with pytest.raises(PruningInfeasibleError) as exc:
        prune_matrix(Z, ["0-2"])
    assert exc.value.row_id == "0-1"
    assert exc.value.original is Z


@settings(max_examples=60, deadline=None)
@given(data=st.data())
def test_prune_property(grid9, data):
    # surviving rows renormalize to unit mass and keep their ratios
    k = 9
    rng = np.random.default_rng(data.draw(st.integers(0, 2**32 - 1)))
    entries = rng.dirichlet(np.ones(k) * 2.0, size=k)
    Z = ObfuscationMatrix(level=0, node_ids=grid9.levels[0], entries=entries)
    n_prune = data.draw(st.integers(1, k - 2))
    prune = sorted(data.draw(st.permutations(list(Z.node_ids)))[:n_prune])
    pruned = prune_matrix(Z, prune)
    assert pruned.k == k - n_prune
    assert np.allclose(pruned.entries.sum(axis=1), 1.0, atol=1e-9)
    keep = [i for i, nid in enumerate(Z.node_ids) if nid not in set(prune)]
    for a, i in enumerate(keep):
        for b, j in enumerate(keep):
            ratio = Z.entries[i, keep].sum()
            assert pruned.entries[a, b] * ratio == pytest.approx(
                Z.entries[i, j], abs=1e-12
            )


def grouped_matrix(grid4):
    # groups under level 1: {0-00, 0-01} and {0-10, 0-11}
    ids = grid4.levels[0]
    parents = {nid: grid4.nodes[nid] for nid in grid4.levels[1]}
    assert set(parents["1-0"].children) == {"0-00", "0-01"}
    entries = np.array(
        [
            [0.4, 0.2, 0.2, 0.2],
            [0.1, 0.3, 0.3, 0.3],
            [0.25, 0.25, 0.25, 0.25],
            [0.2, 0.2, 0.3, 0.3],
        ]
    )
    return ObfuscationMatrix(level=0, node_ids=ids, entries=entries)


def test_reduce_precision_oracle(grid4):
    # uniform priors make each coarse entry the group mean of row sums:
    # rows (.6, .4) over G0 average to .5, rows (.5, .4) to .45
    Z = grouped_matrix(grid4)
    reduced = reduce_precision(Z, grid4, 1)
    assert reduced.node_ids == ("1-0", "1-1")
    assert reduced.level == 1
    assert reduced.entries[0] == pytest.approx([0.5, 0.5])
    assert reduced.entries[1] == pytest.approx([0.45, 0.55])


def test_reduce_precision_preserves_constant_budget(grid4):
    Z = grouped_matrix(grid4)
    kappa = constant_budget_of(Z)
    reduced = reduce_precision(Z, grid4, 1)
    assert math.isfinite(kappa)
    assert audit_constant_budget(reduced, kappa).ok


def test_reduce_precision_composition(grid9):
    rng = np.random.default_rng(11)
    entries = rng.dirichlet(np.ones(9), size=9)
    Z = ObfuscationMatrix(level=0, node_ids=grid9.levels[0], entries=entries)
    direct = reduce_precision(Z, grid9, 2)
    staged = reduce_precision(reduce_precision(Z, grid9, 1), grid9, 2)
    assert direct.node_ids == staged.node_ids
    assert np.allclose(direct.entries, staged.entries, atol=1e-9)


def test_reduce_precision_on_pruned(grid4):
    Z = grouped_matrix(grid4)
    pruned = prune_matrix(Z, ["0-01"])
    reduced = reduce_precision(pruned, grid4, 1)
    assert reduced.node_ids == ("1-0", "1-1")
    assert np.allclose(reduced.entries.sum(axis=1), 1.0, atol=1e-12)
    # the surviving group member alone defines the first coarse row
    assert reduced.entries[0] == pytest.approx(
        [pruned.entries[0, 0], pruned.entries[0, 1:].sum()]
    )


def test_reduce_precision_bad_levels(grid4):
    Z = grouped_matrix(grid4)
    with pytest.raises(ValueError):
        reduce_precision(Z, grid4, 0)
    with pytest.raises(ValueError):
        reduce_precision(Z, grid4, 5)
