"""Exception and warning types raised across the package."""


class ProbReconcError(Exception):
    """Base class for all errors raised by this package."""


# --- structure construction / validation ---

class OverlapError(ProbReconcError):
    """Two sibling nodes at the same level share a bottom leaf."""


class NestingError(ProbReconcError):
    """A node's leaf set partially overlaps a higher-level node (one-parent violation)."""


class EmptyNodeError(ProbReconcError):
    """An upper node aggregates no bottom leaves."""


class NonDivisorError(ProbReconcError):
    """A temporal aggregation factor does not divide the base period count."""


class DimensionError(ProbReconcError):
    """A vector or matrix does not match the structure's dimensions."""


class NotATreeError(ProbReconcError):
    """The structure has residual constraints and cannot be treated as a tree."""


# --- distributions and estimators ---

class DegenerateSampleError(ProbReconcError):
    """A sample is too degenerate (e.g. all values equal) to fit or estimate from."""


class UnderdispersedError(ProbReconcError):
    """Sample variance does not exceed the mean, so no negative binomial fits."""


# --- reconciliation ---

class SingularMatrixError(ProbReconcError):
    """A matrix required to be invertible is numerically singular."""


class AllZeroWeightsError(ProbReconcError):
    """Every particle received zero weight (extreme incoherence or support mismatch)."""

    def __init__(self, message: str, node: str | None = None):
        super().__init__(message)
        self.node = node


class ZeroDensityStartError(ProbReconcError):
    """The Markov chain's initial point has zero target density."""


class SupportTooLargeError(ProbReconcError):
    """Brute-force enumeration of the bottom support would be too large."""


# --- metrics ---

class ZeroReferenceError(ProbReconcError):
    """A reference value is zero, so a percentage error is undefined."""


class FlatTrainSeriesError(ProbReconcError):
    """The training series is constant, so the naive scale Q is zero."""


class InvalidIntervalError(ProbReconcError):
    """Interval lower bound exceeds the upper bound."""


class DegenerateDenominatorError(ProbReconcError):
    """Both metric values are zero, so the skill score is undefined."""


class OddSampleCountWarning(UserWarning):
    """An odd particle count was reduced by one to form pairs."""
