import math

import numpy as np
import pytest

from geocloak.errors import BudgetExhaustedError, CapacityError, SynthesisError
from geocloak.geoind import ObfuscationMatrix, audit_delta_prunable, audit_geo_ind, expected_loss
from geocloak.synthesis import (
    RPB_APPROXIMATE,
    RPB_EXACT,
    RpbTable,
    SynthesisConfig,
    compute_rpb,
    compute_rpb_approx,
    compute_rpb_exact,
    generate_feasible_matrix,
    generate_robust_matrix,
    random_feasible_matrix,
    zero_rpb,
)

# worked by hand on the shared 3x3 example with line distances
# d(0,1) = d(1,2) = 1, d(0,2) = 2 and delta = 1: for each ordered pair
# the winning subset maximizes (1 - z_j[S]) / (1 - z_i[S])
ORACLE_RPB_D1 = {
    (0, 1): math.log(1.6),
    (0, 2): math.log(1.4) / 2,
    (1, 0): math.log(1.6),
    (1, 2): math.log(1.4),
    (2, 0): math.log(7 / 6) / 2,
    (2, 1): math.log(7 / 6),
}


def test_exact_rpb_oracle(line3, oracle_matrix):
    table = compute_rpb_exact(oracle_matrix, 1, line3)
    for (i, j), want in ORACLE_RPB_D1.items():
        assert table.entries[i, j] == pytest.approx(want, abs=1e-12), (i, j)
    assert np.all(np.diag(table.entries) == 0)


def test_exact_rpb_delta0_is_zero(line3, oracle_matrix):
    table = compute_rpb_exact(oracle_matrix, 0, line3)
    assert np.all(table.entries == 0)


def test_exact_rpb_uniform_is_zero(line3, make_matrix):
    Z = make_matrix(line3, np.full((3, 3), 1 / 3))
    for delta in (1, 2):
        table = compute_rpb_exact(Z, delta, line3)
        assert np.allclose(table.entries, 0.0, atol=1e-15)


def test_approx_rpb_closed_form(grid4):
    # uniform rows: top-1 mass 0.25 in every row, so the bound reduces to
    # (1/d) ln((1 - M e^{-eps d}) / (1 - M)) with M = 0.25
    eps = math.log(2.0)
    ids = grid4.levels[0]
    Z = ObfuscationMatrix(level=0, node_ids=ids, entries=np.full((4, 4), 0.25))
    table = compute_rpb_approx(Z, 1, grid4, eps)

    def bound(d):
        M = 0.25
        return math.log((1 - M * math.exp(-eps * d)) / (1 - M)) / d

    from geocloak.geoind import pairwise_distances

    D = pairwise_distances(grid4, ids)
    for i in range(4):
        for j in range(4):
            if i == j:
                continue
            assert table.entries[i, j] == pytest.approx(bound(D[i, j]), rel=1e-12)


def test_approx_dominates_exact(grid9):
    # the approximate budget is a certified upper bound on the exact one
    # whenever the matrix satisfies the plain constraint
    rng = np.random.default_rng(7)
    ids = grid9.levels[0]
    eps = 10.0
    for _ in range(25):
        Z = random_feasible_matrix(grid9, ids, eps, rng)
        for delta in (1, 2, 3):
            exact = compute_rpb_exact(Z, delta, grid9)
            approx = compute_rpb_approx(Z, delta, grid9, eps)
            assert np.all(approx.entries >= exact.entries - 1e-12)


def test_approx_requires_plain_feasibility(line3, make_matrix):
    # a matrix violating the plain budget cannot be certified
    Z = make_matrix(line3, [[0.98, 0.01, 0.01], [0.01, 0.98, 0.01], [0.01, 0.01, 0.98]])
    with pytest.raises(SynthesisError):
        compute_rpb_approx(Z, 1, line3, 0.5)


def test_rpb_mode_dispatch(line3, oracle_matrix):
    exact = compute_rpb(oracle_matrix, 1, line3, RPB_EXACT)
    assert exact.entries[0, 1] == pytest.approx(math.log(1.6))
    approx = compute_rpb(oracle_matrix, 1, line3, RPB_APPROXIMATE, epsilon=5.0)
    assert np.all(approx.entries >= exact.entries - 1e-12)
    with pytest.raises(ValueError):
        compute_rpb(oracle_matrix, 1, line3, "fancy")


def test_exact_rpb_caps(grid9, oracle_matrix, line3):
    with pytest.raises(CapacityError):
        compute_rpb_exact(oracle_matrix, 3, line3)  # delta >= K
    big = ObfuscationMatrix(
        level=0,
        node_ids=tuple(f"n{i}" for i in range(30)),
        entries=np.full((30, 30), 1 / 30),
    )
    with pytest.raises(CapacityError):
        compute_rpb_exact(big, 2, grid9)


def test_rpb_table_validation():
    with pytest.raises(ValueError):
        RpbTable(node_ids=("a", "b"), entries=np.array([[0.0, 1.0], [1.0, 0.5]]))
    with pytest.raises(ValueError):
        RpbTable(node_ids=("a", "b"), entries=np.array([[0.0, -1.0], [1.0, 0.0]]))


def test_random_feasible_matrix_is_feasible(grid9):
    rng = np.random.default_rng(3)
    ids = grid9.levels[0]
    for eps in (2.0, 10.0, 40.0):
        Z = random_feasible_matrix(grid9, ids, eps, rng)
        assert Z.entries.min() > 0
        assert audit_geo_ind(Z, grid9, eps).ok


def test_config_validation(grid9):
    leaves = grid9.levels[0]
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=0.0, targets=leaves[:1])
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=1.0, targets=())
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=1.0, targets=leaves[:1], delta=-1)
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=1.0, targets=leaves[:1], centering_gap=0.0)
    with pytest.raises(ValueError):
        SynthesisConfig(epsilon=1.0, targets=leaves[:1], rpb_mode="fancy")


def test_feasible_matrix_beats_random(grid9):
    ids = grid9.levels[0]
    targets = ids[:3]
    config = SynthesisConfig(epsilon=10.0, targets=targets)
    Z, objective = generate_feasible_matrix(ids, grid9, None, config)
    assert audit_geo_ind(Z, grid9, 10.0).ok
    priors = {nid: 1.0 for nid in ids}
    loss = expected_loss(Z, grid9, priors, targets)
    assert loss == pytest.approx(objective, rel=1e-6)
    rng = np.random.default_rng(0)
    rand_loss = expected_loss(
        random_feasible_matrix(grid9, ids, 10.0, rng), grid9, priors, targets
    )
    assert loss <= rand_loss + 1e-9


def test_robust_delta0_converges_immediately(grid9):
    ids = grid9.levels[0]
    config = SynthesisConfig(epsilon=10.0, delta=0, targets=ids[:3])
    result = generate_robust_matrix(ids, grid9, None, config)
    assert result.converged
    assert result.iterations == 1
    assert result.divergence_trace[-1] == 0.0
    assert result.violation_count == 0


def test_robust_smoke(grid9):
    # small instance at eps * cell = 1: settles fast and survives every
    # single-column prune at the audit tolerance
    ids = grid9.levels[0]
    config = SynthesisConfig(
        epsilon=10.0,
        delta=1,
        targets=ids,
        convergence_threshold=1e-4,
        max_iterations=25,
        centering_gap=5e-2,
    )
    result = generate_robust_matrix(ids, grid9, None, config)
    assert result.converged
    assert audit_delta_prunable(result.matrix, grid9, 10.0, 1).ok
    assert result.violation_count == 0
    man = result.manifest()
    assert man["delta"] == 1
    assert man["iterations"] == result.iterations
    assert len(man["divergence_trace"]) == result.iterations


def test_robust_small_k_oscillates_honestly(line3):
    # delta/K = 1/3 sits outside the contraction regime: the reserved
    # budget swings between ~0 and ~epsilon and the loop flip-flops.
    # The contract is faithful reporting, not forced convergence, and
    # the returned iterate must still be audited
    ids = line3.levels[0]
    config = SynthesisConfig(
        epsilon=2.0, delta=1, targets=ids, max_iterations=10
    )
    result = generate_robust_matrix(ids, line3, None, config)
    assert not result.converged
    assert result.iterations == 10
    assert len(result.divergence_trace) == 10
    assert result.divergence_trace[-1] > config.convergence_threshold
    assert result.violation_audit == "delta_prunable"
    assert result.violation_count == audit_delta_prunable(
        result.matrix, line3, 2.0, 1
    ).count
    assert result.manifest()["converged"] is False
    assert result.manifest()["violations"]["audit"] == "delta_prunable"


def test_budget_exhausted_abort(line3):
    # K = 3 rows have top-2 mass >= 2/3, which already forces the
    # approximate bound past a small epsilon: the loop must abort rather
    # than emit an unsound matrix
    ids = line3.levels[0]
    config = SynthesisConfig(
        epsilon=0.3,
        delta=2,
        targets=ids[:1],
        rpb_mode=RPB_APPROXIMATE,
        max_iterations=5,
    )
    with pytest.raises(BudgetExhaustedError):
        generate_robust_matrix(ids, line3, None, config)


def test_zero_rpb_shape():
    table = zero_rpb(("a", "b", "c"))
    assert table.entries.shape == (3, 3)
    assert np.all(table.entries == 0)
