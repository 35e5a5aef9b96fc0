"""Spatially varying parameter processes for mu, tau, sigma and Sigma.

Each target is described by a :class:`ProcessModelSpec`; together with
the smoothness, likelihood kind and priors they form a :class:`ModelSpec`.
``build_layout`` derives the named parameter vector a model needs and
``FieldBuilder`` turns a parameter state into a :class:`KernelField`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import expit

from .covariance import KernelField, MaternSpec, matern_correlation
from .errors import (
    ConfigurationError,
    DataError,
    DegenerateKnotsError,
    ShapeError,
    UnsupportedDimensionError,
)
from .params import (
    CholeskySPD,
    Identity,
    Log,
    ParamInfo,
    ParamLayout,
    Prior,
    ScaledLogit,
    ThetaState,
    parse_prior,
)

TARGETS = ("mu", "tau", "sigma", "Sigma")
LEGAL_KINDS = {
    "mu": ("constant", "linReg", "approxGP"),
    "tau": ("constant", "logLinReg", "approxGP"),
    "sigma": ("constant", "logLinReg", "approxGP"),
    "Sigma": ("constant", "covReg", "compReg", "npApproxGP", "isoConstant", "isoLogLinReg", "isoApproxGP"),
}
REGRESSION_KINDS = ("linReg", "logLinReg", "covReg", "compReg", "isoLogLinReg")
GP_KINDS = ("approxGP", "npApproxGP", "isoApproxGP")
LIKELIHOODS = ("fullGP", "NNGP", "SGV")
HALF_PI = np.pi / 2
EIGEN_FLOOR = 1e-10


@dataclass(frozen=True)
class ProcessModelSpec:
    """Model choice for one parameter process.

    Design matrices are supplied with the data (keyed by ``target``) so the
    same spec can be evaluated at observed and prediction locations.
    """

    target: str
    kind: str = "constant"
    knots: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.target not in LEGAL_KINDS:
            raise ConfigurationError(f"unknown process target {self.target!r}")
        if self.kind not in LEGAL_KINDS[self.target]:
            raise ConfigurationError(
                f"process kind {self.kind!r} is not allowed for target {self.target!r}; "
                f"choose from {', '.join(LEGAL_KINDS[self.target])}"
            )
        if self.kind in GP_KINDS:
            if self.knots is None:
                raise ConfigurationError(f"{self.target} model {self.kind!r} needs knots")
            knots = np.asarray(self.knots, dtype=float)
            object.__setattr__(self, "knots", knots.reshape(-1, 1) if knots.ndim == 1 else knots)
        elif self.knots is not None:
            raise ConfigurationError(f"{self.target} model {self.kind!r} takes no knots")

    @property
    def needs_design(self):
        return self.kind in REGRESSION_KINDS

    @property
    def is_iso(self):
        return self.kind.startswith("iso")


@dataclass(frozen=True)
class ModelSpec:
    """Full declarative model: four processes, likelihood and settings.

    ``priors`` maps parameter names to overrides; ``fixed`` maps names to
    natural-scale constants that are held out of sampling. ``scale_upper``
    is the upper bound of the uniform priors on tau, sigma and latent-GP SDs.
    """

    mu: ProcessModelSpec = field(default_factory=lambda: ProcessModelSpec("mu"))
    tau: ProcessModelSpec = field(default_factory=lambda: ProcessModelSpec("tau"))
    sigma: ProcessModelSpec = field(default_factory=lambda: ProcessModelSpec("sigma"))
    Sigma: ProcessModelSpec = field(default_factory=lambda: ProcessModelSpec("Sigma"))
    likelihood: str = "fullGP"
    k: int = 15
    nu: float = 0.5
    nu_phi: float = 5.0
    eigen_cap: Optional[float] = None
    sgv_strategy: str = "sgv"
    scale_upper: float = 100.0
    gp_range_upper: float = 10.0
    priors: Mapping[str, object] = field(default_factory=dict)
    fixed: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        for t in TARGETS:
            spec = getattr(self, t)
            if isinstance(spec, str):
                spec = ProcessModelSpec(t, spec)
                object.__setattr__(self, t, spec)
            if spec.target != t:
                raise ConfigurationError(f"{t}_model has target {spec.target!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigurationError(f"unknown likelihood {self.likelihood!r}; choose from {LIKELIHOODS}")
        if self.likelihood != "fullGP" and self.k < 1:
            raise ConfigurationError("neighbor count k must be >= 1")
        if self.eigen_cap is not None and not self.eigen_cap > 0:
            raise ConfigurationError("eigen_cap must be positive")
        MaternSpec(self.nu)
        MaternSpec(self.nu_phi)

    @property
    def matern(self):
        return MaternSpec(self.nu)

    def process(self, target) -> ProcessModelSpec:
        return getattr(self, target)

    def fingerprint(self):
        """Short stable hash of everything that determines the parameter layout."""
        import hashlib
        import json

        def norm(v):
            if isinstance(v, np.ndarray):
                return np.round(v, 12).tolist()
            if isinstance(v, ProcessModelSpec):
                return {"kind": v.kind, "knots": norm(v.knots) if v.knots is not None else None}
            if isinstance(v, Mapping):
                return {str(a): norm(b) for a, b in sorted(v.items())}
            if isinstance(v, Prior):
                return v.describe()
            if isinstance(v, (list, tuple)):
                return [norm(x) for x in v]
            return v

        payload = {f: norm(getattr(self, f)) for f in self.__dataclass_fields__}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class SpatialData:
    """Coordinates, response and per-target design matrices.

    ``designs`` maps a process target to its N x p covariate matrix
    (intercept column included by the caller).
    """

    coords: np.ndarray
    z: Optional[np.ndarray] = None
    designs: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.coords, dtype=float)
        X = X.reshape(-1, 1) if X.ndim == 1 else X
        if X.ndim != 2 or X.shape[0] == 0:
            raise DataError("coordinates must be a non-empty N x d array")
        if not np.all(np.isfinite(X)):
            row = int(np.flatnonzero(~np.all(np.isfinite(X), axis=1))[0])
            raise DataError(f"non-finite coordinate in row {row}")
        object.__setattr__(self, "coords", X)
        if self.z is not None:
            z = np.asarray(self.z, dtype=float).ravel()
            if z.size != X.shape[0]:
                raise ShapeError(f"response has {z.size} values for {X.shape[0]} locations")
            if not np.all(np.isfinite(z)):
                raise DataError(f"non-finite response in row {int(np.flatnonzero(~np.isfinite(z))[0])}")
            object.__setattr__(self, "z", z)
        designs = {}
        for key, mat in dict(self.designs).items():
            if key not in TARGETS:
                raise ConfigurationError(f"design given for unknown target {key!r}")
            mat = np.asarray(mat, dtype=float)
            mat = mat.reshape(-1, 1) if mat.ndim == 1 else mat
            if mat.shape[0] != X.shape[0]:
                raise ShapeError(f"{key} design has {mat.shape[0]} rows for {X.shape[0]} locations")
            if not np.all(np.isfinite(mat)):
                row = int(np.flatnonzero(~np.all(np.isfinite(mat), axis=1))[0])
                raise DataError(f"non-finite {key} covariate in row {row}")
            designs[key] = mat
        object.__setattr__(self, "designs", designs)

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return SpatialData(
            self.coords[idx],
            None if self.z is None else self.z[idx],
            {k: v[idx] for k, v in self.designs.items()},
        )

    def mean_design(self, model: ModelSpec):
        """Design used for the mean: intercept only unless mu is a regression."""
        if model.mu.kind == "linReg":
            return self.design("mu")
        return np.ones((self.n, 1))

    def design(self, target):
        if target not in self.designs:
            raise ConfigurationError(f"a design matrix for {target!r} is required by the model")
        return self.designs[target]


# ------------------------------------------------------------ approxGP basis

@dataclass(frozen=True)
class ApproxGPBasis:
    """Radial basis ``P V^{-1/2}`` linking knots to locations."""

    knots: np.ndarray
    P: np.ndarray
    V_inv_sqrt: np.ndarray
    rho: float
    nu_phi: float

    @property
    def B(self):
        return self.P @ self.V_inv_sqrt


def check_knots(knots):
    knots = np.asarray(knots, dtype=float)
    if knots.shape[0] < 1:
        raise DegenerateKnotsError("at least one knot is required")
    if knots.shape[0] > 1 and np.min(pdist(knots)) <= 0:
        raise DegenerateKnotsError("knot locations must be distinct")
    return knots


def knot_correlation(knots, rho, nu_phi):
    D = cdist(knots, knots)
    return matern_correlation(D / rho, nu_phi)


def inverse_sqrt_spd(V, floor=EIGEN_FLOOR):
    """Symmetric inverse square root via eigendecomposition with an eigenvalue floor."""
    w, Q = np.linalg.eigh(V)
    w = np.maximum(w, floor)
    out = (Q / np.sqrt(w)) @ Q.T
    return 0.5 * (out + out.T)


def build_basis(coords, knots, rho, nu_phi=5.0, V_inv_sqrt=None) -> ApproxGPBasis:
    """Correlations from locations to knots plus the knot inverse square root."""
    if not rho > 0:
        raise ConfigurationError("latent GP range must be positive")
    knots = check_knots(knots)
    coords = np.asarray(coords, dtype=float)
    if coords.shape[1] != knots.shape[1]:
        raise ShapeError("knots and coordinates differ in dimension")
    P = matern_correlation(cdist(coords, knots) / rho, nu_phi)
    if V_inv_sqrt is None:
        V_inv_sqrt = inverse_sqrt_spd(knot_correlation(knots, rho, nu_phi))
    return ApproxGPBasis(knots, P, V_inv_sqrt, float(rho), float(nu_phi))


# ---------------------------------------------------------------- layout

def _gp_params(prefix, K, model, sd_upper=None, n_mean=1):
    pri = model.priors
    sd_upper = model.scale_upper if sd_upper is None else sd_upper
    return [
        ParamInfo(f"{prefix}_gp_mean", n_mean, Identity(), parse_prior(pri.get(f"{prefix}_gp_mean", Prior("normal", 0, 100)))),
        ParamInfo(f"{prefix}_gp_sd", 1, Log(), parse_prior(pri.get(f"{prefix}_gp_sd", Prior("uniform", 0, sd_upper)))),
        ParamInfo(f"{prefix}_gp_range", 1, Log(), parse_prior(pri.get(f"{prefix}_gp_range", Prior("uniform", 0, model.gp_range_upper)))),
    ]


def _w_param(name, K, model):
    return ParamInfo(name, K, Identity(), parse_prior(model.priors.get(name, Prior("normal", 0, 1))))


def build_layout(model: ModelSpec, data: SpatialData) -> ParamLayout:
    """Named parameter blocks required by ``model`` for this data set."""
    d = data.dim
    pri = model.priors
    out = []

    def get(name, default):
        return parse_prior(pri.get(name, default))

    def ncov(target):
        return data.design(target).shape[1]

    mu = model.mu
    if mu.kind == "constant":
        out.append(ParamInfo("beta", 1, Identity(), get("beta", Prior("normal", 0, 100)), mean_only=True))
    elif mu.kind == "linReg":
        out.append(ParamInfo("beta", ncov("mu"), Identity(), get("beta", Prior("normal", 0, 100)), mean_only=True))
    else:
        K = mu.knots.shape[0]
        gp = _gp_params("mu", K, model)
        out.extend(ParamInfo(p.name, p.size, p.transform, p.prior, mean_only=True) for p in gp)
        out.append(ParamInfo("mu_w", K, Identity(), get("mu_w", Prior("normal", 0, 1)), mean_only=True))

    for t in ("tau", "sigma"):
        spec = model.process(t)
        if spec.kind == "constant":
            out.append(ParamInfo(t, 1, Log(), get(t, Prior("uniform", 0, model.scale_upper))))
        elif spec.kind == "logLinReg":
            out.append(ParamInfo(f"{t}_coef", ncov(t), Identity(), get(f"{t}_coef", Prior("normal", 0, 10))))
        else:
            out.extend(_gp_params(t, spec.knots.shape[0], model))
            out.append(_w_param(f"{t}_w", spec.knots.shape[0], model))

    S = model.Sigma
    if S.kind in ("compReg", "npApproxGP") and d != 2:
        raise UnsupportedDimensionError(f"Sigma model {S.kind!r} is only defined for d=2 (got d={d})")
    if S.kind == "constant":
        if d == 2:
            out.append(ParamInfo("Sigma_eig", 2, Log(), get("Sigma_eig", Prior("lognormal", 0, 10))))
            out.append(ParamInfo("Sigma_angle", 1, ScaledLogit(0, HALF_PI), get("Sigma_angle", Prior("uniform", 0, HALF_PI))))
        else:
            nch = CholeskySPD.size_for(d)
            out.append(ParamInfo("Sigma_chol", nch, CholeskySPD(d),
                                 get("Sigma_chol", Prior("normal", 0, 10, scale="unconstrained")), shape=(d, d)))
    elif S.kind == "covReg":
        nch = CholeskySPD.size_for(d)
        out.append(ParamInfo("Sigma_psi", nch, CholeskySPD(d),
                             get("Sigma_psi", Prior("normal", 0, 10, scale="unconstrained")), shape=(d, d)))
        out.append(ParamInfo("Sigma_gamma", d * ncov("Sigma"), Identity(), get("Sigma_gamma", Prior("normal", 0, 10))))
    elif S.kind == "compReg":
        p = ncov("Sigma")
        for comp in ("eig1", "eig2", "angle"):
            out.append(ParamInfo(f"Sigma_{comp}_coef", p, Identity(), get(f"Sigma_{comp}_coef", Prior("normal", 0, 10))))
    elif S.kind == "npApproxGP":
        K = S.knots.shape[0]
        out.extend(_gp_params("Sigma_eig", K, model, sd_upper=10.0, n_mean=2))
        out.append(_w_param("Sigma_eig1_w", K, model))
        out.append(_w_param("Sigma_eig2_w", K, model))
        out.extend(_gp_params("Sigma_angle", K, model, sd_upper=20.0))
        out.append(_w_param("Sigma_angle_w", K, model))
    elif S.kind == "isoConstant":
        out.append(ParamInfo("Sigma_iso", 1, Log(), get("Sigma_iso", Prior("lognormal", 0, 10))))
    elif S.kind == "isoLogLinReg":
        out.append(ParamInfo("Sigma_coef", ncov("Sigma"), Identity(), get("Sigma_coef", Prior("normal", 0, 10))))
    else:
        out.extend(_gp_params("Sigma", S.knots.shape[0], model))
        out.append(_w_param("Sigma_w", S.knots.shape[0], model))

    known = {p.name for p in out}
    stray = set(model.priors) - known
    if stray:
        raise ConfigurationError(f"priors given for parameters the model does not have: {sorted(stray)}")
    return ParamLayout(out, model.fixed)


# ------------------------------------------------------------ evaluation

class BasisCache:
    """Memoize radial bases by (location set, knots, range).

    Knot-only quantities are shared between observed and prediction sites.
    """

    def __init__(self, nu_phi=5.0, maxsize=64):
        self.nu_phi = nu_phi
        self.maxsize = maxsize
        self._vinv = {}
        self._basis = {}

    def get(self, coords, knots, rho):
        kkey = (id(knots), float(rho))
        key = (id(coords), kkey)
        hit = self._basis.get(key)
        if hit is not None and hit[0] is coords and hit[1] is knots:
            return hit[2]
        vinv = self._vinv.get(kkey)
        if vinv is None or vinv[0] is not knots:
            V = inverse_sqrt_spd(knot_correlation(check_knots(knots), rho, self.nu_phi))
            if len(self._vinv) >= self.maxsize:
                self._vinv.clear()
            self._vinv[kkey] = (knots, V)
        else:
            V = vinv[1]
        basis = build_basis(coords, knots, rho, self.nu_phi, V_inv_sqrt=V)
        if len(self._basis) >= self.maxsize:
            self._basis.clear()
        self._basis[key] = (coords, knots, basis)
        return basis


def _gp_linear(prefix, spec, theta, coords, cache, w_name=None, mean_index=None):
    """``mu_phi + sigma_phi * P V^{-1/2} w`` at ``coords``."""
    basis = cache.get(coords, spec.knots, theta[f"{prefix}_gp_range"])
    w = np.asarray(theta[w_name or f"{prefix}_w"], dtype=float).ravel()
    if w.size != spec.knots.shape[0]:
        raise ShapeError(f"{w_name or prefix + '_w'} has {w.size} values for {spec.knots.shape[0]} knots")
    mean = theta[f"{prefix}_gp_mean"]
    if mean_index is not None:
        mean = np.ravel(mean)[mean_index]
    return mean + theta[f"{prefix}_gp_sd"] * (basis.P @ (basis.V_inv_sqrt @ w))


def _design(designs, target, n, p_expected):
    if target not in designs:
        raise ConfigurationError(f"a design matrix for {target!r} is required by the model")
    X = np.asarray(designs[target], dtype=float)
    X = X.reshape(-1, 1) if X.ndim == 1 else X
    if X.shape != (n, p_expected):
        raise ShapeError(f"{target} design is {X.shape}, expected ({n}, {p_expected})")
    return X


def eval_scalar_process(spec: ProcessModelSpec, theta: ThetaState, coords, designs=None, cache=None):
    """Per-location mu, tau or sigma."""
    coords = np.asarray(coords, dtype=float)
    n = coords.shape[0]
    cache = cache or BasisCache()
    t = spec.target
    if t not in ("mu", "tau", "sigma"):
        raise ConfigurationError("eval_scalar_process handles mu, tau and sigma")
    if t == "mu":
        if spec.kind == "constant":
            return np.full(n, np.ravel(theta["beta"])[0])
        if spec.kind == "linReg":
            beta = np.atleast_1d(theta["beta"])
            return _design(designs or {}, "mu", n, beta.size) @ beta
        return _gp_linear("mu", spec, theta, coords, cache)
    if spec.kind == "constant":
        return np.full(n, theta[t])
    if spec.kind == "logLinReg":
        coef = np.atleast_1d(theta[f"{t}_coef"])
        return np.exp(_design(designs or {}, t, n, coef.size) @ coef)
    return np.exp(_gp_linear(t, spec, theta, coords, cache))


def rotation_matrix(angle):
    c, s = np.cos(angle), np.sin(angle)
    R = np.empty(np.shape(angle) + (2, 2))
    R[..., 0, 0], R[..., 0, 1] = c, -s
    R[..., 1, 0], R[..., 1, 1] = s, c
    return R


def compose_2d(lam1, lam2, angle):
    """``R(angle) diag(lam1, lam2) R(angle)^T`` for arrays of components."""
    lam1, lam2, angle = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (lam1, lam2, angle)))
    c, s = np.cos(angle), np.sin(angle)
    out = np.empty(lam1.shape + (2, 2))
    out[..., 0, 0] = lam1 * c * c + lam2 * s * s
    out[..., 1, 1] = lam1 * s * s + lam2 * c * c
    out[..., 0, 1] = out[..., 1, 0] = (lam1 - lam2) * c * s
    return out


def eval_anisotropy(spec: ProcessModelSpec, theta: ThetaState, coords, designs=None, cache=None, eigen_cap=None):
    """Per-location anisotropy.

    Returns ``(Sigma, Sigma_iso)``: full (N, d, d) matrices, and for the
    isotropic kinds also the scalar per location (else ``None``).
    """
    coords = np.asarray(coords, dtype=float)
    n, d = coords.shape
    cache = cache or BasisCache()
    kind = spec.kind

    def cap(lam):
        return lam if eigen_cap is None else np.minimum(lam, eigen_cap)

    if kind in ("compReg", "npApproxGP") and d != 2:
        raise UnsupportedDimensionError(f"Sigma model {kind!r} is only defined for d=2 (got d={d})")
    if kind == "constant":
        if "Sigma_chol" in theta:
            S = np.asarray(theta["Sigma_chol"])
        else:
            if d != 2:
                raise UnsupportedDimensionError("eigen/angle anisotropy needs d=2")
            lam = cap(np.asarray(theta["Sigma_eig"], dtype=float))
            S = compose_2d(lam[0], lam[1], theta["Sigma_angle"])
        return np.broadcast_to(S, (n, d, d)), None
    if kind == "covReg":
        Psi = np.asarray(theta["Sigma_psi"])
        X = _design(designs or {}, "Sigma", n, np.size(theta["Sigma_gamma"]) // d)
        G = np.asarray(theta["Sigma_gamma"], dtype=float).reshape(d, X.shape[1])
        gx = X @ G.T
        return Psi[None] + gx[:, :, None] * gx[:, None, :], None
    if kind == "compReg":
        p = np.size(theta["Sigma_eig1_coef"])
        X = _design(designs or {}, "Sigma", n, p)
        lam1 = cap(np.exp(X @ np.atleast_1d(theta["Sigma_eig1_coef"])))
        lam2 = cap(np.exp(X @ np.atleast_1d(theta["Sigma_eig2_coef"])))
        ang = HALF_PI * expit(X @ np.atleast_1d(theta["Sigma_angle_coef"]))
        return compose_2d(lam1, lam2, ang), None
    if kind == "npApproxGP":
        lam1 = cap(np.exp(_gp_linear("Sigma_eig", spec, theta, coords, cache, "Sigma_eig1_w", 0)))
        lam2 = cap(np.exp(_gp_linear("Sigma_eig", spec, theta, coords, cache, "Sigma_eig2_w", 1)))
        ang = HALF_PI * expit(_gp_linear("Sigma_angle", spec, theta, coords, cache, "Sigma_angle_w"))
        return compose_2d(lam1, lam2, ang), None
    if kind == "isoConstant":
        iso = np.full(n, theta["Sigma_iso"])
    elif kind == "isoLogLinReg":
        coef = np.atleast_1d(theta["Sigma_coef"])
        iso = np.exp(_design(designs or {}, "Sigma", n, coef.size) @ coef)
    else:
        iso = np.exp(_gp_linear("Sigma", spec, theta, coords, cache))
    iso = cap(iso)
    return iso[:, None, None] * np.eye(d), iso


def assemble_kernel_field(model: ModelSpec, theta: ThetaState, coords, designs=None, cache=None) -> KernelField:
    """Evaluate all four processes at ``coords``."""
    cache = cache or BasisCache(model.nu_phi)
    designs = designs or {}
    mu = eval_scalar_process(model.mu, theta, coords, designs, cache)
    tau = eval_scalar_process(model.tau, theta, coords, designs, cache)
    sigma = eval_scalar_process(model.sigma, theta, coords, designs, cache)
    Sigma, iso = eval_anisotropy(model.Sigma, theta, coords, designs, cache, model.eigen_cap)
    return KernelField(coords, mu, tau, sigma, Sigma, iso)


class FieldBuilder:
    """Evaluate kernel fields for one model at fixed coordinates.

    Holds a basis cache so repeated evaluations with the same latent-GP
    range reuse the radial basis.
    """

    def __init__(self, model: ModelSpec, coords, designs: Optional[Mapping[str, np.ndarray]] = None):
        self.model = model
        self.coords = np.ascontiguousarray(coords, dtype=float)
        self.designs = dict(designs or {})
        self.cache = BasisCache(model.nu_phi)

    def __call__(self, theta: ThetaState) -> KernelField:
        return assemble_kernel_field(self.model, theta, self.coords, self.designs, self.cache)

    def mean(self, theta: ThetaState):
        return eval_scalar_process(self.model.mu, theta, self.coords, self.designs, self.cache)


def moment_initial_values(model: ModelSpec, data: SpatialData, layout: ParamLayout) -> Dict[str, np.ndarray]:
    """Rough data-driven starting values on the natural scale.

    Least squares for the mean, a 20/80 nugget/partial-sill split of the
    residual variance, and a range of a tenth of the domain diameter.
    """
    vals = {}
    X = data.mean_design(model)
    if model.mu.kind in ("constant", "linReg"):
        beta, *_ = np.linalg.lstsq(X, data.z, rcond=None)
        resid = data.z - X @ beta
        vals["beta"] = beta if model.mu.kind == "linReg" else beta[:1]
    else:
        resid = data.z - data.z.mean()
        vals["mu_gp_mean"] = np.array([data.z.mean()])
    var = max(float(np.var(resid)), 1e-8)
    span = np.ptp(data.coords, axis=0)
    diam = float(np.sqrt(np.sum(span ** 2))) or 1.0
    ell2 = (0.1 * diam) ** 2
    if "tau" in layout.slices:
        vals["tau"] = np.sqrt(0.2 * var)
    if "sigma" in layout.slices:
        vals["sigma"] = np.sqrt(0.8 * var)
    for t, share in (("tau", 0.2), ("sigma", 0.8)):
        if f"{t}_gp_mean" in layout.slices:
            vals[f"{t}_gp_mean"] = np.array([0.5 * np.log(share * var)])
        if f"{t}_coef" in layout.slices:
            c = np.zeros(layout.info[f"{t}_coef"].size)
            c[0] = 0.5 * np.log(share * var)
            vals[f"{t}_coef"] = c
    if "Sigma_eig" in layout.slices:
        vals["Sigma_eig"] = np.array([ell2, ell2])
    if "Sigma_chol" in layout.slices:
        vals["Sigma_chol"] = ell2 * np.eye(data.dim)
    if "Sigma_psi" in layout.slices:
        vals["Sigma_psi"] = ell2 * np.eye(data.dim)
    if "Sigma_iso" in layout.slices:
        vals["Sigma_iso"] = ell2
    if "Sigma_eig_gp_mean" in layout.slices:
        vals["Sigma_eig_gp_mean"] = np.full(2, np.log(ell2))
    if "Sigma_gp_mean" in layout.slices:
        vals["Sigma_gp_mean"] = np.array([np.log(ell2)])
    for comp in ("eig1", "eig2"):
        if f"Sigma_{comp}_coef" in layout.slices:
            c = np.zeros(layout.info[f"Sigma_{comp}_coef"].size)
            c[0] = np.log(ell2)
            vals[f"Sigma_{comp}_coef"] = c
    if "Sigma_coef" in layout.slices:
        c = np.zeros(layout.info["Sigma_coef"].size)
        c[0] = np.log(ell2)
        vals["Sigma_coef"] = c
    for name in layout.slices:
        if name.endswith("_gp_sd"):
            vals[name] = np.array([min(1.0, 0.5 * layout.info[name].prior.b)])
        elif name.endswith("_gp_range"):
            vals[name] = np.array([min(0.3 * diam, 0.5 * layout.info[name].prior.b)])
    return vals


def initial_state(model: ModelSpec, data: SpatialData, layout: ParamLayout, method="moment", overrides=None) -> ThetaState:
    """Starting parameter state from prior medians or data moments, with overrides."""
    base = layout.prior_median_state()
    vals = {}
    if method == "moment":
        if data.z is None:
            raise DataError("moment initialization needs the response")
        vals.update({k: v for k, v in moment_initial_values(model, data, layout).items() if k in layout.slices})
    elif method != "median":
        raise ConfigurationError(f"unknown initialization method {method!r}")
    vals.update(overrides or {})
    return layout.from_natural(vals, default=base)
