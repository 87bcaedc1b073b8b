"""Exception hierarchy shared by all histmatch modules."""


class HistMatchError(Exception):
    """Base class for every error raised by the package."""


class SchemaError(HistMatchError, ValueError):
    """Column names, output names or config fields do not line up."""


class DomainError(HistMatchError, ValueError):
    """A point lies outside the parameter ranges."""


class DegenerateRangeError(HistMatchError, ValueError):
    """A column has zero spread, so no box can be built from it."""

    def __init__(self, column):
        super().__init__(f"column {column!r} has zero spread")
        self.column = column


class HyperparameterError(HistMatchError, ValueError):
    """Invalid correlation hyperparameters (e.g. non-positive theta)."""


class ConditioningError(HistMatchError, ArithmeticError):
    """Var[D] could not be factorised even after jitter."""


class InsufficientDataError(HistMatchError, ValueError):
    """Too few runs for the requested fit."""


class NumericDegeneracyError(HistMatchError, ArithmeticError):
    """Zero predictive spread where a positive one is required."""
