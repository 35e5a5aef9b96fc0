"""Bayesian inference and prediction for nonstationary spatial Gaussian processes."""
from ._backend import name as backend_name
from .covariance import (
    KernelField,
    MaternSpec,
    cov_matrix,
    iso_ns_covariance,
    matern_correlation,
    ns_covariance,
    ns_quadratic_form,
)
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateKnotsError,
    DomainError,
    IllConditionedKernelError,
    NSGPError,
    NumericalError,
    ShapeError,
    UnsupportedDimensionError,
)

__version__ = "0.1.0"
