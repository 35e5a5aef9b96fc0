"""Nonstationary Matérn covariance built from spatially varying kernels.

The covariance between locations s and s' is

    sigma(s) sigma(s') |S(s)|^{1/4} |S(s')|^{1/4} / |(S(s) + S(s'))/2|^{1/2}
        * M_nu(sqrt(Q)),   Q = h^T ((S(s) + S(s'))/2)^{-1} h,  h = s - s'

with ``M_nu`` the Matérn correlation without any sqrt(2 nu) rescaling; all
distance scaling lives in the anisotropy matrices ``S``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import gammaln, kv

from . import _backend
from .errors import DomainError, IllConditionedKernelError, NumericalError, ShapeError

COND_LIMIT = 1e12
HALF_INTEGER = (0.5, 1.5, 2.5)


@dataclass(frozen=True)
class MaternSpec:
    """Matérn smoothness; fixed for a given analysis."""

    nu: float = 0.5

    def __post_init__(self):
        if not (np.isfinite(self.nu) and self.nu > 0):
            raise DomainError(f"Matérn smoothness must be positive, got {self.nu}")


def check_spd(mat, what="anisotropy matrix", tol=1e-12):
    """Validate a symmetric positive-definite matrix, returning it as an array."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.shape[0] != mat.shape[1]:
        raise ShapeError(f"{what} must be square, got {mat.shape}")
    scale = max(1.0, np.max(np.abs(mat)))
    if np.max(np.abs(mat - mat.T)) > tol * scale:
        raise DomainError(f"{what} is not symmetric")
    if np.min(np.linalg.eigvalsh(mat)) <= 0:
        raise DomainError(f"{what} is not positive definite")
    return mat


def _matern_bessel(t, nu):
    t = np.asarray(t, dtype=float)
    out = np.ones_like(t)
    pos = t > 0
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        k = kv(nu, t[pos])
        val = np.exp((1.0 - nu) * np.log(2.0) - gammaln(nu) + nu * np.log(t[pos]) + np.log(k))
    val = np.where(k == 0.0, 0.0, val)
    out[pos] = np.where(np.isfinite(k), val, 1.0)
    return out


def matern_correlation(t, spec: MaternSpec | float, method="auto"):
    """Matérn correlation ``2^{1-nu}/Gamma(nu) t^nu K_nu(t)``, equal to 1 at 0.

    Half-integer smoothness uses the closed forms unless ``method='bessel'``.
    """
    nu = spec.nu if isinstance(spec, MaternSpec) else float(spec)
    arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr < 0):
        raise DomainError("Matérn argument must be finite and nonnegative")
    flat = arr.ravel()
    if method == "bessel" or (method == "auto" and nu not in HALF_INTEGER):
        out = _matern_bessel(flat, nu)
    else:
        out = _backend._kernels_py.matern(flat, nu)
    out = out.reshape(arr.shape)
    return float(out) if np.ndim(t) == 0 else out


def ns_quadratic_form(s, s2, Sig1, Sig2):
    """Squared Mahalanobis distance under the averaged kernel matrix."""
    h = np.atleast_1d(np.asarray(s, dtype=float) - np.asarray(s2, dtype=float))
    A = 0.5 * (np.atleast_2d(Sig1) + np.atleast_2d(Sig2))
    if A.shape != (h.size, h.size):
        raise ShapeError(f"dimension mismatch: displacement {h.size}, matrix {A.shape}")
    if np.linalg.cond(A) > COND_LIMIT:
        raise IllConditionedKernelError("averaged anisotropy matrix is numerically singular")
    return float(h @ np.linalg.solve(A, h))


@dataclass(frozen=True)
class KernelField:
    """Per-location parameter values feeding the covariance.

    ``Sigma`` always holds full (N, d, d) matrices; in locally isotropic mode
    ``Sigma_iso`` additionally holds the scalar and ``Sigma = Sigma_iso * I``.
    """

    coords: np.ndarray
    mu: np.ndarray
    tau: np.ndarray
    sigma: np.ndarray
    Sigma: np.ndarray
    Sigma_iso: Optional[np.ndarray] = None
    _root4: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        X = np.asarray(self.coords, dtype=float)
        X = np.array(X.reshape(-1, 1) if X.ndim == 1 else X, order="C")
        n, d = X.shape
        vals = {}
        for name in ("mu", "tau", "sigma"):
            v = np.array(np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)), order="C")
            vals[name] = v
        if np.any(vals["tau"] < 0) or np.any(vals["sigma"] <= 0):
            raise DomainError("tau must be >= 0 and sigma > 0 at every location")
        if self.Sigma_iso is not None:
            iso = np.array(np.broadcast_to(np.asarray(self.Sigma_iso, dtype=float), (n,)), order="C")
            if np.any(iso <= 0) or not np.all(np.isfinite(iso)):
                raise DomainError("scalar anisotropy must be positive")
            S = np.ascontiguousarray(iso[:, None, None] * np.eye(d))
            root4 = iso ** (d / 4.0)
        else:
            S = np.array(np.broadcast_to(np.asarray(self.Sigma, dtype=float), (n, d, d)), order="C")
            iso = None
            det = np.linalg.det(S)
            if np.any(det <= 0) or not np.all(np.isfinite(det)):
                raise DomainError("anisotropy matrices must be positive definite")
            root4 = det ** 0.25
        object.__setattr__(self, "coords", X)
        for name, v in vals.items():
            object.__setattr__(self, name, v)
        object.__setattr__(self, "Sigma", S)
        object.__setattr__(self, "Sigma_iso", iso)
        object.__setattr__(self, "_root4", np.ascontiguousarray(root4))

    @property
    def n(self):
        return self.coords.shape[0]

    @property
    def dim(self):
        return self.coords.shape[1]

    @property
    def iso_mode(self):
        return self.Sigma_iso is not None

    def take(self, idx):
        idx = np.asarray(idx, dtype=np.intp)
        return KernelField(
            self.coords[idx], self.mu[idx], self.tau[idx], self.sigma[idx],
            self.Sigma[idx], None if self.Sigma_iso is None else self.Sigma_iso[idx],
        )

    def concat(self, other: "KernelField"):
        if self.iso_mode != other.iso_mode:
            raise ShapeError("cannot join isotropic and anisotropic fields")
        return KernelField(
            np.vstack([self.coords, other.coords]),
            np.concatenate([self.mu, other.mu]),
            np.concatenate([self.tau, other.tau]),
            np.concatenate([self.sigma, other.sigma]),
            np.concatenate([self.Sigma, other.Sigma]),
            None if self.Sigma_iso is None else np.concatenate([self.Sigma_iso, other.Sigma_iso]),
        )

    def kernel_args(self):
        """Positional arrays in the order the kernel backends expect."""
        iso = self.Sigma_iso if self.Sigma_iso is not None else self._root4
        return self.coords, self.sigma, self.Sigma, iso, self._root4


def ns_covariance(i, j, field: KernelField, spec: MaternSpec):
    """Reference covariance for one pair of locations (no nugget).

    Written with plain numpy linear algebra so it can serve as an oracle for
    the compiled kernels.
    """
    i, j = (i, j) if i <= j else (j, i)
    Si, Sj = field.Sigma[i], field.Sigma[j]
    A = 0.5 * (Si + Sj)
    Q = ns_quadratic_form(field.coords[i], field.coords[j], Si, Sj)
    pref = (np.linalg.det(Si) * np.linalg.det(Sj)) ** 0.25 / np.sqrt(np.linalg.det(A))
    return float(field.sigma[i] * field.sigma[j] * pref * matern_correlation(np.sqrt(Q), spec))


def iso_ns_covariance(i, j, field: KernelField, spec: MaternSpec):
    """Locally isotropic covariance, depending only on squared distance."""
    if field.Sigma_iso is None:
        raise DomainError("field does not carry scalar anisotropy")
    i, j = (i, j) if i <= j else (j, i)
    a, b = field.Sigma_iso[i], field.Sigma_iso[j]
    if a <= 0 or b <= 0:
        raise DomainError("scalar anisotropy must be positive")
    d = field.dim
    avg = 0.5 * (a + b)
    h2 = float(np.sum((field.coords[i] - field.coords[j]) ** 2))
    pref = (a * b) ** (d / 4.0) / avg ** (d / 2.0)
    return float(field.sigma[i] * field.sigma[j] * pref * matern_correlation(np.sqrt(h2 / avg), spec))


def cov_matrix(field: KernelField, spec: MaternSpec, rows=None, cols=None, add_nugget=False):
    """Covariance matrix between index sets of one field.

    With ``add_nugget`` the squared error SD is added where the row and column
    refer to the same observation.
    """
    n = field.n
    if rows is None and cols is None:
        C = cross_cov(field, field, spec, symmetric=True)
        if add_nugget:
            C[np.diag_indices(n)] += field.tau ** 2
        return C
    rows = np.arange(n) if rows is None else np.asarray(rows, dtype=np.intp)
    cols = rows if cols is None else np.asarray(cols, dtype=np.intp)
    symmetric = rows.shape == cols.shape and np.array_equal(rows, cols)
    a = field.take(rows)
    b = a if symmetric else field.take(cols)
    C = cross_cov(a, b, spec, symmetric=symmetric)
    if add_nugget:
        same = rows[:, None] == cols[None, :]
        C = C + np.where(same, a.tau[:, None] * b.tau[None, :], 0.0)
    return C


def cross_cov(f1: KernelField, f2: KernelField, spec: MaternSpec, symmetric=False):
    """Latent covariance between every location of ``f1`` and of ``f2``."""
    if f1.iso_mode != f2.iso_mode:
        raise ShapeError("cannot mix isotropic and anisotropic fields")
    return _backend.kernels.cov_block(
        *f1.kernel_args(), *f2.kernel_args(), float(spec.nu), f1.iso_mode, bool(symmetric)
    )


def jitter_cholesky(A, what="covariance matrix", **context):
    """Lower Cholesky factor, retrying with growing diagonal jitter.

    Adds 1e-8 * mean(diag), then x10, up to three retries.
    """
    try:
        return scipy.linalg.cholesky(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        pass
    base = 1e-8 * float(np.mean(np.diag(A)))
    eye = np.eye(A.shape[0])
    for attempt in range(3):
        try:
            return scipy.linalg.cholesky(A + base * 10.0 ** attempt * eye, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(f"Cholesky of {what} failed after jitter", **context)
