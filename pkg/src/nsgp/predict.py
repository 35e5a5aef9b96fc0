"""Posterior predictive draws at new locations.

Each predictor loops over retained parameter states and, per state, forms
the conditional distribution of the latent process (``target='y'``) or of
new responses (``target='z'``) at the prediction sites:

* ``predict_full``: dense conditional Gaussian.
* ``predict_sgv``: prediction sites are appended after the observed ones;
  a joint posterior draw of the observed latents is pushed through the
  prediction sites' local regressions, so joint draws cost O((N + M) k).
* ``predict_nngp``: independent local kriging from the k nearest observed
  responses (marginal only).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg
from scipy.spatial import cKDTree

from .covariance import cov_matrix, cross_cov, jitter_cholesky
from .errors import ConfigurationError, NumericalError, ShapeError
from .likelihood import DEFAULT_DENSE_CAP, LikelihoodEngine, _local
from .neighbors import obs_pred_extend
from .params import ThetaState
from .processes import FieldBuilder, ModelSpec, SpatialData

DEFAULT_EVERY = 10
SGV_MOMENT_LIMIT = 500


@dataclass(frozen=True)
class PredictionRequest:
    """Prediction sites, their covariates and what to predict.

    ``designs`` maps process targets to M x p covariate matrices for
    regression-based processes. ``joint=True`` asks for joint draws.
    """

    coords: np.ndarray
    designs: Mapping[str, np.ndarray] = field(default_factory=dict)
    target: str = "z"
    joint: bool = False

    def __post_init__(self):
        X = np.asarray(self.coords, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if X.size else X.reshape(0, 1)
        if not np.all(np.isfinite(X)):
            raise ShapeError("prediction coordinates must be finite")
        object.__setattr__(self, "coords", X)
        if self.target not in ("y", "z"):
            raise ConfigurationError("prediction target must be 'y' (latent) or 'z' (response)")
        designs = {}
        for key, mat in dict(self.designs).items():
            mat = np.asarray(mat, dtype=float)
            mat = mat.reshape(-1, 1) if mat.ndim == 1 else mat
            if mat.shape[0] != X.shape[0]:
                raise ShapeError(f"{key} prediction design has {mat.shape[0]} rows for {X.shape[0]} sites")
            designs[key] = mat
        object.__setattr__(self, "designs", designs)

    @property
    def m(self):
        return self.coords.shape[0]


@dataclass
class PredictiveDraws:
    """One draw per parameter state and site, plus per-state conditional moments.

    ``cond_mean`` and ``cond_var`` hold the exact conditional mean and
    variance for each state when the predictor computed them.
    """

    draws: np.ndarray
    target: str
    joint: bool
    cond_mean: Optional[np.ndarray] = None
    cond_var: Optional[np.ndarray] = None

    @property
    def mean(self):
        return summarize(self)[0]

    @property
    def sd(self):
        return summarize(self)[1]


def summarize(draws):
    """Per-site mean and SD (denominator L - 1) of a draw matrix."""
    D = draws.draws if isinstance(draws, PredictiveDraws) else np.asarray(draws, dtype=float)
    if D.shape[0] < 2:
        raise ConfigurationError("summaries need at least two draws")
    return D.mean(axis=0), D.std(axis=0, ddof=1)


def thinned_states(samples, every=DEFAULT_EVERY) -> Sequence[ThetaState]:
    """Every ``every``-th retained state of a :class:`PosteriorSamples`."""
    return samples.states(every) if hasattr(samples, "states") else list(samples)


def _rngs(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _psd_draw(mean, cov, rng):
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    return mean + V @ (np.sqrt(np.clip(w, 0.0, None)) * rng.standard_normal(w.size))


def _check_dims(request, data):
    if request.m and request.coords.shape[1] != data.dim:
        raise ShapeError(f"prediction sites have {request.coords.shape[1]} coordinates, data have {data.dim}")


def _empty(states, request):
    L = len(states)
    z = np.empty((L, 0))
    return PredictiveDraws(z, request.target, request.joint, z.copy(), z.copy())


# ------------------------------------------------------------ exact

def predict_full(samples, request: PredictionRequest, data: SpatialData, model: ModelSpec, seed=0,
                 every=DEFAULT_EVERY, dense_cap=DEFAULT_DENSE_CAP) -> PredictiveDraws:
    """Dense conditional Gaussian prediction for each retained state."""
    states = thinned_states(samples, every)
    _check_dims(request, data)
    if request.m == 0:
        return _empty(states, request)
    if data.n + request.m > dense_cap:
        raise ConfigurationError(f"N + M = {data.n + request.m} exceeds the dense cap of {dense_cap}")
    spec = model.matern
    obs = FieldBuilder(model, data.coords, data.designs)
    new = FieldBuilder(model, request.coords, request.designs)
    L, M = len(states), request.m
    draws = np.empty((L, M))
    means = np.empty((L, M))
    vars_ = np.empty((L, M))
    for l, (theta, rng) in enumerate(zip(states, _rngs(seed, L))):
        fo, fp = obs(theta), new(theta)
        try:
            C = jitter_cholesky(cov_matrix(fo, spec, add_nugget=True), "observed covariance", sample=l)
        except NumericalError as exc:
            raise NumericalError(f"prediction failed: {exc}", sample=l) from exc
        K = cross_cov(fp, fo, spec)
        A = scipy.linalg.solve_triangular(C, K.T, lower=True, check_finite=False)
        v = scipy.linalg.solve_triangular(C, data.z - fo.mu, lower=True, check_finite=False)
        m = fp.mu + A.T @ v
        if request.joint:
            cov = cross_cov(fp, fp, spec, symmetric=True) - A.T @ A
            if request.target == "z":
                cov[np.diag_indices(M)] += fp.tau ** 2
            var = np.diag(cov).copy()
            draws[l] = _psd_draw(m, cov, rng)
        else:
            var = fp.sigma ** 2 - np.sum(A * A, axis=0)
            if request.target == "z":
                var = var + fp.tau ** 2
            draws[l] = m + np.sqrt(np.clip(var, 0.0, None)) * rng.standard_normal(M)
        means[l], vars_[l] = m, var
    return PredictiveDraws(draws, request.target, request.joint, means, vars_)


# ------------------------------------------------------------ SGV

class SGVPredictionPlan:
    """Extended obs-pred ordering and the prediction-site conditioning sets."""

    def __init__(self, engine: LikelihoodEngine, request: PredictionRequest, k=None):
        if engine.kind != "SGV":
            raise ConfigurationError("SGV prediction needs an SGV likelihood engine")
        self.engine = engine
        self.n = engine.data.n
        self.m = request.m
        k = engine.model.k if k is None else k
        self.ext, graph = obs_pred_extend(engine.ordered, engine.graph, request.coords, k)
        nbr = np.full(graph.nbr.shape, -1, dtype=np.intp)
        nbr[self.n:] = graph.nbr[self.n:]
        self.nbr = nbr
        self.latent = (nbr >= 0).astype(np.uint8)
        self.builder = FieldBuilder(engine.model, request.coords, request.designs)


def predict_sgv(samples, request: PredictionRequest, data: SpatialData, model: ModelSpec, seed=0,
                every=DEFAULT_EVERY, engine: Optional[LikelihoodEngine] = None, k=None,
                moments: Optional[bool] = None) -> PredictiveDraws:
    """Joint predictive draws through the obs-pred extended SGV structure.

    Per state, observed latents are drawn from their SGV posterior given
    the responses and each prediction site is then drawn from its local
    regression on earlier latents. ``moments`` requests exact per-state
    conditional means and variances (default: only when M is small).
    """
    states = thinned_states(samples, every)
    _check_dims(request, data)
    if request.m == 0:
        return _empty(states, request)
    engine = engine or LikelihoodEngine(replace(model, likelihood="SGV"), data)
    plan = SGVPredictionPlan(engine, request, k)
    n, M = plan.n, plan.m
    moments = M <= SGV_MOMENT_LIMIT if moments is None else moments
    spec = engine.spec
    L = len(states)
    draws = np.empty((L, M))
    means = np.empty((L, M)) if moments else None
    vars_ = np.empty((L, M)) if moments else None
    rows = np.repeat(np.arange(M), plan.nbr.shape[1])
    for l, (theta, rng) in enumerate(zip(states, _rngs(seed, L))):
        try:
            factor = engine.factor(theta)
            fo = engine.builder(theta)
            fp = plan.builder(theta)
            B, dvar = _local(fo.concat(fp), spec, plan.nbr, plan.latent, "SGV prediction")
        except NumericalError as exc:
            raise NumericalError(f"prediction failed: {exc}", sample=l) from exc
        B, dvar = B[n:], dvar[n:]
        cols = plan.nbr[n:].ravel()
        ok = cols >= 0
        W = sp.csr_matrix((B.ravel()[ok], (rows[ok], cols[ok])), shape=(M, n + M))
        G = (sp.identity(M, format="csr") - W[:, n:]).tocsr()
        Bpo = W[:, :n]
        resid = engine.z - engine.builder.mean(theta)
        y_obs = factor.posterior_draw(resid, rng)
        eps = np.sqrt(dvar) * rng.standard_normal(M)
        y_new = scipy.sparse.linalg.spsolve_triangular(G, Bpo @ y_obs + eps, lower=True)
        out = fp.mu + y_new
        if request.target == "z":
            out = out + fp.tau * rng.standard_normal(M)
        draws[l] = out
        if moments:
            Ginv = scipy.linalg.solve_triangular(G.toarray(), np.eye(M), lower=True)
            A = (sp.csr_matrix(Ginv) @ Bpo).toarray()
            m_obs = factor.posterior_mean(resid)
            means[l] = fp.mu + A @ m_obs
            pl = factor.plan
            v_obs = np.array([np.sum(pl.lsolve(factor.Lx, A[j, ::-1]) ** 2) for j in range(M)])
            var = v_obs + np.sum(Ginv ** 2 * dvar[None, :], axis=1)
            if request.target == "z":
                var = var + fp.tau ** 2
            vars_[l] = var
    return PredictiveDraws(draws, request.target, True, means, vars_)


# ------------------------------------------------------------ NNGP

def predict_nngp(samples, request: PredictionRequest, data: SpatialData, model: ModelSpec, seed=0,
                 every=DEFAULT_EVERY, engine: Optional[LikelihoodEngine] = None, k=None) -> PredictiveDraws:
    """Local kriging from the k nearest observed responses, site by site."""
    if request.joint:
        raise ConfigurationError("NNGP prediction is marginal only; joint draws are not available")
    states = thinned_states(samples, every)
    _check_dims(request, data)
    if request.m == 0:
        return _empty(states, request)
    engine = engine or LikelihoodEngine(replace(model, likelihood="NNGP"), data)
    k = engine.model.k if k is None else k
    n, M = engine.data.n, request.m
    kk = min(int(k), n)
    _, idx = cKDTree(engine.data.coords).query(request.coords, k=kk)
    nbr = np.full((n + M, kk), -1, dtype=np.intp)
    nbr[n:] = np.asarray(idx, dtype=np.intp).reshape(M, kk)
    latent = np.zeros(nbr.shape, dtype=np.uint8)
    new = FieldBuilder(engine.model, request.coords, request.designs)
    spec = engine.spec
    L = len(states)
    draws = np.empty((L, M))
    means = np.empty((L, M))
    vars_ = np.empty((L, M))
    for l, (theta, rng) in enumerate(zip(states, _rngs(seed, L))):
        fo, fp = engine.builder(theta), new(theta)
        try:
            B, dvar = _local(fo.concat(fp), spec, nbr, latent, "NNGP prediction")
        except NumericalError as exc:
            raise NumericalError(f"prediction failed: {exc}", sample=l) from exc
        resid = engine.z - fo.mu
        m = fp.mu + np.sum(B[n:] * resid[nbr[n:]], axis=1)
        var = dvar[n:] + (fp.tau ** 2 if request.target == "z" else 0.0)
        means[l], vars_[l] = m, var
        draws[l] = m + np.sqrt(var) * rng.standard_normal(M)
    return PredictiveDraws(draws, request.target, False, means, vars_)


def predict(samples, request: PredictionRequest, data: SpatialData, model: ModelSpec, seed=0,
            every=DEFAULT_EVERY, engine=None, dense_cap=DEFAULT_DENSE_CAP) -> PredictiveDraws:
    """Dispatch to the predictor matching the model's likelihood."""
    if model.likelihood == "fullGP":
        return predict_full(samples, request, data, model, seed, every, dense_cap)
    if model.likelihood == "SGV":
        return predict_sgv(samples, request, data, model, seed, every, engine)
    return predict_nngp(samples, request, data, model, seed, every, engine)
