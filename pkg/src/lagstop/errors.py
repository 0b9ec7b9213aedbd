"""Exception hierarchy shared by every module.

The CLI maps these to exit codes: configuration problems exit 2, numerical
or data problems exit 3.
"""

from __future__ import annotations


class LagstopError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class InvalidArgument(LagstopError, ValueError):
    exit_code = 2


class GridMismatch(InvalidArgument):
    """A lag or floor does not fall on the time grid."""


class ResourceLimit(LagstopError):
    """A request exceeds a configured size cap (e.g. walk enumeration depth)."""

    exit_code = 2


class NumericalFailure(LagstopError, ArithmeticError):
    """A regression or linear solve produced unusable output."""

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


class DataError(LagstopError):
    """Input data contain NaN/Inf or are otherwise malformed."""


class PayoffEvaluationError(LagstopError):
    """A payoff functional raised or returned non-finite values."""

    def __init__(self, message: str, payoff: int, k: int, path: int | None):
        super().__init__(f"{message} (payoff={payoff}, k={k}, path={path})")
        self.payoff = payoff
        self.k = k
        self.path = path
