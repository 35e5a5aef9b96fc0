"""Marginal log-likelihood of the responses: exact, NNGP-R and SGV.

Every likelihood is split in two stages. ``factorize_*`` does the work
that depends on the covariance parameters and returns a factor object;
``factor.loglik(resid)`` evaluates the density of a residual vector. A
sampler that only moves the mean can therefore reuse the factor.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import _backend
from .covariance import KernelField, MaternSpec, cov_matrix, jitter_cholesky
from .errors import ConfigurationError, NumericalError, ShapeError
from .neighbors import (
    ConditioningSets,
    NeighborGraph,
    OrderedCoords,
    determine_neighbors,
    order_maxmin,
    sgv_setup,
)
from .processes import FieldBuilder, ModelSpec, SpatialData
from .sparse import LatentPrecisionPlan

LOG2PI = np.log(2.0 * np.pi)
DEFAULT_DENSE_CAP = 5000


def _resid(z, field: KernelField):
    z = np.asarray(z, dtype=float).ravel()
    if z.size != field.n:
        raise ShapeError(f"response has {z.size} values for a field of {field.n} locations")
    return z - field.mu


def _local(field: KernelField, spec: MaternSpec, nbr, latent, what):
    X, sig, S, iso, r = field.kernel_args()
    B, dvar, failed = _backend.kernels.local_regressions(
        X, sig, S, iso, r, np.ascontiguousarray(field.tau ** 2),
        np.ascontiguousarray(nbr, dtype=np.intp), np.ascontiguousarray(latent, dtype=np.uint8),
        float(spec.nu), field.iso_mode,
    )
    if failed >= 0:
        raise NumericalError(f"local regression failed in {what}", location=int(failed))
    return B, dvar


# ----------------------------------------------------------------- exact

@dataclass
class DenseFactor:
    L: np.ndarray

    def loglik(self, resid):
        v = scipy.linalg.solve_triangular(self.L, resid, lower=True, check_finite=False)
        n = resid.size
        return float(-0.5 * (n * LOG2PI + v @ v) - np.sum(np.log(np.diag(self.L))))


def factorize_full(field: KernelField, spec: MaternSpec, dense_cap=DEFAULT_DENSE_CAP):
    if field.n > dense_cap:
        raise ConfigurationError(f"exact likelihood with N={field.n} exceeds the dense cap of {dense_cap}")
    C = cov_matrix(field, spec, add_nugget=True)
    return DenseFactor(jitter_cholesky(C, "marginal covariance"))


def loglik_full(z, field: KernelField, spec: MaternSpec, dense_cap=DEFAULT_DENSE_CAP):
    """Exact Gaussian log-likelihood with mean ``field.mu``."""
    return factorize_full(field, spec, dense_cap).loglik(_resid(z, field))


# ------------------------------------------------------------------ NNGP

def vecchia_local_regression(i, cond_set, cov):
    """Regression weights and conditional variance of element ``i``.

    ``cov`` is a covariance matrix or a callable ``cov(rows, cols)``.
    """
    cond = np.asarray(cond_set, dtype=np.intp).ravel()
    get = cov if callable(cov) else (lambda r, c: np.asarray(cov)[np.ix_(r, c)])
    cii = float(get([i], [i])[0, 0])
    if cond.size == 0:
        return np.empty(0), cii
    C = get(cond, cond)
    c = get(cond, [i])[:, 0]
    L = jitter_cholesky(C, "conditioning covariance", location=int(i))
    v = scipy.linalg.solve_triangular(L, c, lower=True)
    d = cii - v @ v
    if not d > 0:
        raise NumericalError("nonpositive conditional variance", location=int(i))
    b = scipy.linalg.solve_triangular(L.T, v, lower=False)
    return b, float(d)


@dataclass
class NNGPFactor:
    nbr: np.ndarray
    B: np.ndarray
    var: np.ndarray

    def conditional_moments(self, resid):
        r_pad = np.append(resid, 0.0)
        mean = np.sum(self.B * r_pad[self.nbr], axis=1)
        return mean, self.var

    def loglik(self, resid):
        m, v = self.conditional_moments(resid)
        e = resid - m
        return float(-0.5 * np.sum(LOG2PI + np.log(v) + e * e / v))


def factorize_nngp(field: KernelField, spec: MaternSpec, graph: NeighborGraph):
    if graph.n != field.n:
        raise ShapeError("neighbor graph and field differ in size")
    nbr = graph.nbr
    B, dvar = _local(field, spec, nbr, np.zeros(nbr.shape, dtype=np.uint8), "NNGP")
    return NNGPFactor(nbr, B, dvar + field.tau ** 2)


def loglik_nngp(z, field: KernelField, spec: MaternSpec, graph: NeighborGraph):
    """Vecchia likelihood conditioning each response on earlier responses."""
    return factorize_nngp(field, spec, graph).loglik(_resid(z, field))


# ------------------------------------------------------------------- SGV

class SGVFactor:
    """Local regressions and the factorized latent precision for SGV.

    Node ``i`` owns the column vector ``u_i`` (diagonal ``1/sqrt(d_i)``, and
    ``-b/sqrt(d_i)`` on its latent conditioning nodes); observed-type
    conditioning enters through ``t_i = -sum(b r)/sqrt(d_i)``.
    """

    def __init__(self, plan: LatentPrecisionPlan, B, dvar, tau):
        self.plan = plan
        self.B = B
        self.dvar = dvar
        self.tau = tau[: plan.n_obs]
        self.inv_tau2 = 1.0 / self.tau ** 2
        self.V = plan.column_values(B, dvar)
        Ax = plan.assemble(self.V, self.inv_tau2)
        self.Ax = Ax
        Lx, failed = plan.factorize(Ax)
        if failed >= 0:
            raise NumericalError("latent precision is not positive definite", column=int(plan.n - 1 - failed))
        self.Lx = Lx
        self.log_det_half = float(np.sum(plan.log_diag(Lx)))
        self.log_det_u = float(np.sum(-0.5 * np.log(dvar)) - np.sum(np.log(self.tau)))

    def observed_terms(self, resid):
        """``t_i`` for every node, given residuals at the observed nodes."""
        plan = self.plan
        r_pad = np.append(resid, 0.0)
        coef = np.where(plan.obs_mask, self.B, 0.0)
        return -np.sum(coef * r_pad[plan.nbr], axis=1) / np.sqrt(self.dvar)

    def rhs(self, resid, t=None):
        t = self.observed_terms(resid) if t is None else t
        out = self.plan.scatter_members(self.V, t)
        out[: self.plan.n_obs] -= resid * self.inv_tau2
        return out

    def posterior_mean(self, resid):
        """Mean of the latent vector given the residuals."""
        v = self.plan.lsolve(self.Lx, self.rhs(resid)[::-1])
        return -self.plan.ltsolve(self.Lx, v)[::-1]

    def posterior_draw(self, resid, rng, size=None):
        """Draws of the latent vector given the residuals."""
        n = self.plan.n
        mean = self.posterior_mean(resid)
        if size is None:
            xi = rng.standard_normal(n)
            return mean + self.plan.ltsolve(self.Lx, xi)[::-1]
        out = np.empty((size, n))
        for s in range(size):
            out[s] = mean + self.plan.ltsolve(self.Lx, rng.standard_normal(n))[::-1]
        return out

    def loglik(self, resid, y_star=None):
        n = self.tau.size
        if resid.size != n:
            raise ShapeError("residual vector does not match the factor")
        t = self.observed_terms(resid)
        quad_z = float(t @ t + np.sum(resid * resid * self.inv_tau2))
        rhs = self.rhs(resid, t)
        v = self.plan.lsolve(self.Lx, rhs[::-1])
        if y_star is None:
            return float(-0.5 * n * LOG2PI + self.log_det_u - 0.5 * quad_z
                         - self.log_det_half + 0.5 * (v @ v))
        return self._loglik_at(resid, np.asarray(y_star, dtype=float), t, rhs, v)

    def _loglik_at(self, resid, y, t, rhs, v):
        # log p(y, z) - log p(y | z) evaluated at an arbitrary latent vector
        plan = self.plan
        n_lat, n = plan.n, self.tau.size
        if y.size != n_lat:
            raise ShapeError("latent evaluation point has the wrong length")
        y_pad = np.append(y, 0.0)
        lat_coef = np.where(plan.members[:, 1:] >= 0, plan.members[:, 1:], n_lat)
        e_y = self.V[:, 0] * y + np.sum(self.V[:, 1:] * y_pad[lat_coef], axis=1) + t
        e_z = (resid - y[:n]) / self.tau
        log_joint = -0.5 * (n_lat + n) * LOG2PI + self.log_det_u - 0.5 * (e_y @ e_y + e_z @ e_z)
        mean = -plan.ltsolve(self.Lx, v)[::-1]
        dev = (y - mean)[::-1]
        w = np.empty_like(dev)
        # L^T P (y - mean): multiply by the transposed factor
        for j in range(n_lat):
            p0, p1 = plan.Lp[j], plan.Lp[j + 1]
            w[j] = self.Lx[p0:p1] @ dev[plan.Li[p0:p1]]
        log_cond = -0.5 * n_lat * LOG2PI + self.log_det_half - 0.5 * (w @ w)
        return float(log_joint - log_cond)


def factorize_sgv(field: KernelField, spec: MaternSpec, csets: ConditioningSets, plan=None, n_obs=None):
    n_obs = field.n if n_obs is None else n_obs
    if np.any(field.tau[:n_obs] <= 0):
        raise NumericalError("SGV needs a strictly positive nugget at every observed location")
    plan = plan or LatentPrecisionPlan(csets.graph.nbr, csets.latent, n_obs)
    B, dvar = _local(field, spec, csets.graph.nbr, csets.latent, "SGV")
    return SGVFactor(plan, B, dvar, field.tau)


def loglik_sgv(z, field: KernelField, spec: MaternSpec, csets: ConditioningSets, y_star=None, plan=None):
    """SGV likelihood with the latent field integrated out."""
    return factorize_sgv(field, spec, csets, plan).loglik(_resid(z, field), y_star)


@dataclass
class SparseUFactor:
    """Upper-triangular factor over the interleaved ``(y_1, z_1, ...)`` vector."""

    U: sp.csc_matrix

    @property
    def n(self):
        return self.U.shape[0] // 2

    def column_nnz(self):
        return np.diff(self.U.indptr)

    def precision(self):
        return (self.U @ self.U.T).toarray()


def build_u_sgv(field: KernelField, spec: MaternSpec, csets: ConditioningSets) -> SparseUFactor:
    """Explicit sparse factor ``U`` of the joint precision of latents and responses."""
    n = field.n
    nbr, latent = csets.graph.nbr, csets.latent
    if np.any(field.tau <= 0):
        raise NumericalError("SGV needs a strictly positive nugget at every location")
    B, dvar = _local(field, spec, nbr, latent, "SGV")
    rows, cols, vals = [], [], []
    for i in range(n):
        s = 1.0 / np.sqrt(dvar[i])
        cy = 2 * i
        rows.append(cy)
        cols.append(cy)
        vals.append(s)
        for a, j in enumerate(nbr[i]):
            if j < 0:
                break
            rows.append(2 * j if latent[i, a] else 2 * j + 1)
            cols.append(cy)
            vals.append(-B[i, a] * s)
        it = 1.0 / field.tau[i]
        rows += [cy, cy + 1]
        cols += [cy + 1, cy + 1]
        vals += [-it, it]
    U = sp.csc_matrix((vals, (rows, cols)), shape=(2 * n, 2 * n))
    U.sort_indices()
    return SparseUFactor(U)


def dense_joint_precision(field: KernelField, spec: MaternSpec):
    """Exact precision of the interleaved ``(y_1, z_1, ...)`` vector."""
    n = field.n
    Cy = cov_matrix(field, spec)
    C = np.empty((2 * n, 2 * n))
    C[0::2, 0::2] = Cy
    C[0::2, 1::2] = Cy
    C[1::2, 0::2] = Cy
    C[1::2, 1::2] = Cy + np.diag(field.tau ** 2)
    return np.linalg.inv(C)


# ------------------------------------------------------------ engine

class LikelihoodEngine:
    """Likelihood of one data set under one model, with a factor cache.

    Data are reordered by maxmin for the Vecchia likelihoods. The factor
    depends only on the non-mean parameters, so mean-only moves reuse it.
    """

    def __init__(self, model: ModelSpec, data: SpatialData, dense_cap=DEFAULT_DENSE_CAP, seed=0,
                 ordered: Optional[OrderedCoords] = None):
        if data.z is None:
            raise ConfigurationError("likelihood needs response values")
        self.model = model
        self.kind = model.likelihood
        self.spec = model.matern
        self.dense_cap = dense_cap
        if self.kind == "fullGP":
            if data.n > dense_cap:
                raise ConfigurationError(f"fullGP with N={data.n} exceeds the dense cap of {dense_cap}")
            self.ordered = None
            self.perm = np.arange(data.n)
            self.data = data
        else:
            self.ordered = ordered or order_maxmin(data.coords, seed=seed)
            self.perm = self.ordered.perm
            self.data = data.subset(self.perm)
            self.graph = determine_neighbors(self.ordered, model.k)
            if self.kind == "SGV":
                self.csets = sgv_setup(self.graph, model.sgv_strategy)
                self.plan = LatentPrecisionPlan(self.graph.nbr, self.csets.latent)
        self.builder = FieldBuilder(model, self.data.coords, self.data.designs)
        self.z = self.data.z
        self._cache = {}
        self.n_factorizations = 0

    def field(self, theta):
        return self.builder(theta)

    def factorize(self, field: KernelField):
        if self.kind == "fullGP":
            return factorize_full(field, self.spec, self.dense_cap)
        if self.kind == "NNGP":
            return factorize_nngp(field, self.spec, self.graph)
        return factorize_sgv(field, self.spec, self.csets, self.plan)

    def factor(self, theta):
        """Factor for ``theta``, reused when only mean parameters changed.

        The two most recent factors are kept so that a rejected proposal
        does not evict the current state's factor.
        """
        key = theta.u[~theta.layout.mean_mask].tobytes()
        hit = self._cache.get(key)
        if hit is None:
            hit = self.factorize(self.builder(theta))
            self.n_factorizations += 1
            if len(self._cache) >= 2:
                self._cache.pop(next(iter(self._cache)))
        else:
            self._cache.pop(key)
        self._cache[key] = hit
        return hit

    def clear_cache(self):
        self._cache.clear()

    def loglik(self, theta):
        factor = self.factor(theta)
        mu = self.builder.mean(theta)
        return factor.loglik(self.z - mu)
