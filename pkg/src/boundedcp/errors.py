"""Exception hierarchy shared by all modules."""

from __future__ import annotations


class BoundedCPError(Exception):
    """Base class for library errors."""


class OutOfDomain(BoundedCPError, ValueError):
    """A parameter lies outside the admissible BAR(1) region."""

    def __init__(self, name: str, value: float, message: str = "") -> None:
        self.name = name
        self.value = value
        super().__init__(message or f"{name}={value!r} is outside the admissible domain")


class InvalidSeries(BoundedCPError, ValueError):
    """Observed counts violate the bounded-series contract."""


class DegenerateSeries(BoundedCPError):
    """A closed-form estimator denominator vanishes (e.g. constant lagged series)."""


class NonpositiveVariance(BoundedCPError):
    """A conditional variance fell below the numerical floor."""


class OptimizerFailure(BoundedCPError):
    """The likelihood optimizer made no progress from any start.

    ``best`` carries the best feasible point found, if any.
    """

    def __init__(self, message: str, best=None) -> None:
        self.best = best
        super().__init__(message)


class SingularMatrix(BoundedCPError):
    """A weighting matrix is not invertible."""


class UnsupportedLevel(BoundedCPError, KeyError):
    """No tabulated critical value for the requested significance level."""


class Infeasible(BoundedCPError, ValueError):
    """The minimum-spacing constraint cannot host the requested change-points."""


class EmptySet(BoundedCPError, ValueError):
    """A set-distance metric received an empty set."""


class ParseError(BoundedCPError, ValueError):
    """A series file could not be parsed."""

    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
