"""Prunable budget-constrained location obfuscation over location trees.

Server side synthesizes row-stochastic obfuscation matrices whose
likelihood ratios respect an exponential distance bound even after any
delta locations are pruned away; user side evaluates policies, prunes,
reduces precision, and samples the reported location.
"""

from .errors import (
    BudgetExhaustedError,
    CapacityError,
    ChecksumError,
    EmptyPriorError,
    ForestError,
    ForestFormatError,
    ForestSynthesisError,
    GeocloakError,
    LevelMismatchError,
    MatrixError,
    PolicyError,
    PruningInfeasibleError,
    SynthesisError,
    TreeError,
    UnboundableBudgetError,
)
from .geoind import (
    GeoIndReport,
    ObfuscationMatrix,
    audit_constant_budget,
    audit_delta_prunable,
    audit_geo_ind,
    expected_loss,
    matrix_from_json,
    matrix_to_json,
    utility_error,
)
from .forest import (
    ForestServer,
    ObfuscationRequest,
    ObfuscationResult,
    PrivacyForest,
    deserialize_forest,
    generate_obfuscated_location,
    generate_privacy_forest,
    serialize_forest,
)
from .policy import (
    Policy,
    Predicate,
    eval_policy,
    policy_from_json,
    policy_to_json,
    prune_matrix,
    reduce_precision,
    reduce_precision_on_pruned,
    validate_policy,
)
from .synthesis import (
    RpbTable,
    SynthesisConfig,
    SynthesisResult,
    build_feasible_lp,
    build_robust_lp,
    compute_rpb_approx,
    compute_rpb_exact,
    generate_feasible_matrix,
    generate_robust_matrix,
    random_feasible_matrix,
)
from .tree import (
    AffineMap,
    CheckInRecord,
    LocationTree,
    TreeConfig,
    TreeNode,
    build_synthetic_tree,
    distance,
    find_subtree,
    from_json,
    ingest_checkins,
    nodes_at_level,
    read_checkin_csv,
    subtree_leaves,
    to_json,
    tree_hash,
    validate_tree,
    with_attributes,
)

__version__ = "0.1.0"
