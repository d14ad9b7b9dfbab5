"""Exception types, mapped onto CLI exit codes."""


class HeckmiError(Exception):
    """Base class for package errors."""

    exit_code = 1


class ConfigError(HeckmiError):
    """Bad configuration: unknown keys, contradictory settings, missing seed."""

    exit_code = 2


class DataError(HeckmiError):
    """Input data violates a precondition (rank, support, missing covariates)."""

    exit_code = 3


class NumericError(HeckmiError):
    """Numerical failure: singular information, indefinite covariance, etc."""

    exit_code = 4


class ConvergenceError(NumericError):
    """An iterative fit ran out of iterations without meeting its tolerance."""
