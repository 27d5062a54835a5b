"""Exception hierarchy shared by all tghrf modules."""

import numpy as np


class TghError(Exception):
    """Base class for every error raised by tghrf."""


class InputError(TghError, ValueError):
    """Invalid arguments: shapes, ranges, counts."""


class DomainError(TghError, ValueError):
    """Parameter outside the region where a density or inverse exists."""


class NumericError(TghError, ArithmeticError):
    """Iterative solver, quadrature or optimizer did not converge."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DecompositionError(TghError, np.linalg.LinAlgError):
    """Matrix factorization failed (not positive definite, singular)."""


class FitError(TghError, ValueError):
    """Estimation cannot proceed on the supplied data."""


class ConditioningError(TghError, ArithmeticError):
    """Sequential conditioning produced a non-positive variance."""


class MetricError(TghError, ValueError):
    """Cluster separation metric is undefined for the given partition."""


class StateError(TghError, RuntimeError):
    """Object used before it was fitted."""


class CsvFormatError(InputError):
    """Malformed CSV input, with file/line/column location."""

    def __init__(self, path, line, column, message):
        self.path = str(path)
        self.line = line
        self.column = column
        super().__init__(f"{self.path}:{line}:{column}: {message}")
