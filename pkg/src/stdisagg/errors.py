"""Exception types shared across the package."""


class StdisaggError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(StdisaggError):
    pass


class NotPositiveDefinite(StdisaggError):
    """Cholesky factorization hit a non-positive pivot.

    `pivot` is the (permuted) column index at which factorization failed,
    when the backend reports one.
    """

    def __init__(self, pivot=None, msg=None):
        self.pivot = pivot
        super().__init__(msg or f"matrix not positive definite (pivot {pivot})")


class InvalidExtent(StdisaggError):
    pass


class IndexOutOfRange(StdisaggError):
    pass


class UnsupportedPower(StdisaggError):
    pass


class IndivisibleFactor(StdisaggError):
    pass


class TorusTooSmall(StdisaggError):
    pass


class NonFiniteLikelihood(StdisaggError):
    pass


class MaxIterationsExceeded(StdisaggError):
    pass


class DegenerateData(StdisaggError):
    pass


class ShapeMismatch(StdisaggError):
    pass


class DisconnectedGraph(StdisaggError):
    pass


class SchemaError(StdisaggError):
    """Malformed record in an input file; `line` is the 1-based line number."""

    def __init__(self, line, msg):
        self.line = line
        super().__init__(f"line {line}: {msg}")


class BoundsError(StdisaggError):
    pass


class DuplicateCell(StdisaggError):
    pass


class CovariateGap(StdisaggError):
    pass
