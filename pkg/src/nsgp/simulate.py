"""Exact draws from the model for testing and synthetic stand-in data."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .covariance import KernelField, cov_matrix, jitter_cholesky
from .errors import ConfigurationError
from .likelihood import DEFAULT_DENSE_CAP
from .params import ThetaState
from .processes import ModelSpec, SpatialData, assemble_kernel_field, build_layout


@dataclass
class Simulation:
    data: SpatialData
    y: np.ndarray
    field: KernelField
    theta: ThetaState


def uniform_coords(n, domain=((0.0, 1.0), (0.0, 1.0)), rng=None):
    """``n`` points uniform on a box given as ``((lo, hi), ...)`` per axis."""
    rng = rng if rng is not None else np.random.default_rng()
    box = np.asarray(domain, dtype=float)
    return box[:, 0] + (box[:, 1] - box[:, 0]) * rng.uniform(size=(n, box.shape[0]))


def grid_knots(coords, shape):
    """Evenly spaced grid of knots over the bounding box of ``coords``."""
    X = np.asarray(coords, dtype=float)
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if len(shape) != X.shape[1]:
        raise ConfigurationError(f"knot grid {shape} does not match d={X.shape[1]}")
    axes = [np.linspace(lo, hi, s) if s > 1 else np.array([(lo + hi) / 2])
            for lo, hi, s in zip(X.min(axis=0), X.max(axis=0), shape)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def simulate(model: ModelSpec, truth: Mapping[str, object], coords=None, n=None, domain=((0.0, 1.0), (0.0, 1.0)),
             designs: Optional[Mapping[str, np.ndarray]] = None, seed=0,
             dense_cap=DEFAULT_DENSE_CAP) -> Simulation:
    """Draw ``y ~ GP(mu, C)`` exactly and ``z = y + tau * eps``.

    ``truth`` gives natural-scale values for every parameter of the model's
    layout (fixed values in the model take precedence).
    """
    rng = np.random.default_rng(seed)
    if coords is None:
        if n is None:
            raise ConfigurationError("give either coordinates or a sample size")
        coords = uniform_coords(int(n), domain, rng)
    coords = np.asarray(coords, dtype=float)
    coords = coords.reshape(-1, 1) if coords.ndim == 1 else coords
    N = coords.shape[0]
    if N > dense_cap:
        raise ConfigurationError(f"exact simulation with N={N} exceeds the dense cap of {dense_cap}")
    data = SpatialData(coords, None, designs or {})
    layout = build_layout(model, data)
    missing = [p for p in layout.names if p not in truth]
    if missing:
        raise ConfigurationError(f"true values missing for {missing}")
    theta = layout.from_natural({k: v for k, v in truth.items() if k in layout.slices})
    field = assemble_kernel_field(model, theta, data.coords, data.designs)
    L = jitter_cholesky(cov_matrix(field, model.matern), "simulation covariance")
    y = field.mu + L @ rng.standard_normal(N)
    z = y + field.tau * rng.standard_normal(N)
    return Simulation(SpatialData(coords, z, data.designs), y, field, theta)
