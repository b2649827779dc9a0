"""Exception types shared across the package."""

from __future__ import annotations


class DpdlmmError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(DpdlmmError):
    """Inputs have inconsistent shapes or sizes."""


class NotPositiveDefinite(DpdlmmError):
    """A per-group covariance matrix failed its Cholesky factorization.

    Carries the index of the offending group; usually signals an error
    variance that is (numerically) zero or a degenerate random-effect design.
    """

    def __init__(self, group_index: int, message: str | None = None):
        self.group_index = group_index
        super().__init__(
            message or f"covariance matrix of group {group_index} is not positive definite"
        )


class NotBalanced(DpdlmmError):
    """The balanced-design fast path was requested on an unbalanced design."""


class DidNotConverge(DpdlmmError):
    """The solver hit its iteration cap without meeting the tolerances.

    ``result`` holds the best point found so far (with ``converged=False``).
    """

    def __init__(self, result, message: str = "solver did not converge"):
        self.result = result
        super().__init__(message)


class SingularPsi(DpdlmmError):
    """The estimating-equation curvature matrix is not invertible."""


class SingularSigma0(DpdlmmError):
    """The reference covariance matrix of a metric is singular."""


class SingularEstimate(DpdlmmError):
    """A fitted covariance matrix is singular; the replication is flagged."""
