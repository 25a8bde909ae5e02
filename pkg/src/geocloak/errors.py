"""Exception types shared across the package."""


class GeocloakError(Exception):
    """Base class for all package errors."""


class CapacityError(GeocloakError):
    """A size cap was exceeded (leaf count, LP dimension, oracle bounds)."""


class TreeError(GeocloakError):
    """A location tree violates a structural invariant."""


class EmptyPriorError(TreeError):
    """Ingestion produced no in-region records, so priors are undefined."""


class LevelMismatchError(TreeError):
    """An operation required nodes at the same level and got mixed levels."""


class MatrixError(GeocloakError):
    """An obfuscation matrix violates unit measure or shape constraints."""


class SynthesisError(GeocloakError):
    """Matrix synthesis failed (infeasible program, diverged run)."""


class BudgetExhaustedError(SynthesisError):
    """Some reserved budget reached or exceeded the total budget.

    The tightened constraint for such a pair would be infeasible, so the
    run aborts instead of clamping. ``pairs`` lists offending (i, j) node
    id pairs with their reserved budgets.
    """

    def __init__(self, message, pairs=()):
        super().__init__(message)
        self.pairs = tuple(pairs)


class UnboundableBudgetError(SynthesisError):
    """A candidate prune subset drives a row's surviving mass to zero.

    The worst-case renormalization ratio is unbounded, so no finite
    reserved budget exists for the named pair.
    """

    def __init__(self, message, row_id=None, subset=()):
        super().__init__(message)
        self.row_id = row_id
        self.subset = tuple(subset)


class PruningInfeasibleError(GeocloakError):
    """Pruning would remove all probability mass from some row.

    ``original`` carries the untouched input matrix so callers that want
    the keep-the-matrix fallback can use it directly.
    """

    def __init__(self, message, row_id=None, original=None):
        super().__init__(message)
        self.row_id = row_id
        self.original = original


class PolicyError(GeocloakError):
    """A policy or predicate is malformed or references unknown data."""


class ForestError(GeocloakError):
    """Privacy forest construction or exchange failed."""


class ForestSynthesisError(ForestError):
    """Synthesis failed for one subtree; ``root_id`` names its root."""

    def __init__(self, message, root_id=None):
        super().__init__(message)
        self.root_id = root_id


class ForestFormatError(ForestError):
    """Serialized forest has an unknown format or version."""


class ChecksumError(ForestError):
    """Serialized forest payload failed its integrity check."""
