"""Exception hierarchy shared across the package."""


class NSGPError(Exception):
    """Base class for all package errors."""


class DomainError(NSGPError, ValueError):
    """An argument lies outside the domain of a function."""


class ShapeError(NSGPError, ValueError):
    """Array dimensions do not agree."""


class IllConditionedKernelError(NSGPError):
    """A kernel matrix average is numerically singular."""


class DegenerateKnotsError(NSGPError, ValueError):
    """Knot locations are duplicated."""


class UnsupportedDimensionError(NSGPError, ValueError):
    """A model component does not support the spatial dimension."""


class ConfigurationError(NSGPError, ValueError):
    """Model or run configuration is invalid."""


class DataError(NSGPError, ValueError):
    """Input data is malformed (missing columns, NaN, ...)."""


class NumericalError(NSGPError, ArithmeticError):
    """A factorization failed even after jitter.

    ``context`` carries where it happened (iteration, sample index, column).
    """

    def __init__(self, message, **context):
        self.context = context
        if context:
            extra = ", ".join(f"{k}={v}" for k, v in context.items())
            message = f"{message} ({extra})"
        super().__init__(message)
