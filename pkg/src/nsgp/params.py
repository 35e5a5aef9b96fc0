"""Parameter vectors: transforms, priors and a named flat layout.

Samplers work on an unconstrained real vector. Each named block carries a
transform mapping the unconstrained values into the parameter's legal domain
and a prior, stated either on the natural scale (the log-Jacobian of the
transform is then added) or directly on the unconstrained scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy import stats
from scipy.special import expit, log_expit, logit

from .errors import ConfigurationError, DomainError


# ---------------------------------------------------------------- transforms

class Transform:
    name = "identity"

    def forward(self, u):
        return np.asarray(u, dtype=float)

    def inverse(self, x):
        return np.asarray(x, dtype=float)

    def log_jacobian(self, u):
        return 0.0

    def in_domain(self, x):
        return bool(np.all(np.isfinite(x)))

    def __repr__(self):
        return self.name


class Identity(Transform):
    pass


class Log(Transform):
    name = "log"

    def forward(self, u):
        return np.exp(u)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x <= 0):
            raise DomainError("log transform needs positive values")
        return np.log(x)

    def log_jacobian(self, u):
        return float(np.sum(u))

    def in_domain(self, x):
        return bool(np.all(np.asarray(x) > 0))


class ScaledLogit(Transform):
    """Map the real line onto (lo, hi) through the logistic function."""

    def __init__(self, lo=0.0, hi=np.pi / 2):
        self.lo, self.hi = float(lo), float(hi)
        self.name = f"scaled_logit({self.lo:g},{self.hi:g})"

    def forward(self, u):
        return self.lo + (self.hi - self.lo) * expit(u)

    def inverse(self, x):
        x = np.asarray(x, dtype=float)
        if np.any((x <= self.lo) | (x >= self.hi)):
            raise DomainError(f"value outside ({self.lo}, {self.hi})")
        return logit((x - self.lo) / (self.hi - self.lo))

    def log_jacobian(self, u):
        u = np.asarray(u, dtype=float)
        return float(np.sum(np.log(self.hi - self.lo) + log_expit(u) + log_expit(-u)))

    def in_domain(self, x):
        x = np.asarray(x)
        return bool(np.all((x >= self.lo) & (x <= self.hi)))


class CholeskySPD(Transform):
    """Unconstrained vector of length d(d+1)/2 <-> SPD matrix.

    The vector fills a lower-triangular factor row by row; diagonal entries
    are stored on the log scale.
    """

    name = "cholesky_spd"

    def __init__(self, d):
        self.d = int(d)
        self.rows, self.cols = np.tril_indices(self.d)
        self.diag = self.rows == self.cols

    @staticmethod
    def size_for(d):
        return d * (d + 1) // 2

    def factor(self, u):
        u = np.asarray(u, dtype=float)
        L = np.zeros((self.d, self.d))
        L[self.rows, self.cols] = np.where(self.diag, np.exp(u), u)
        return L

    def forward(self, u):
        L = self.factor(u)
        return L @ L.T

    def inverse(self, x):
        L = np.linalg.cholesky(np.asarray(x, dtype=float))
        v = L[self.rows, self.cols].copy()
        v[self.diag] = np.log(v[self.diag])
        return v

    def in_domain(self, x):
        try:
            np.linalg.cholesky(x)
        except np.linalg.LinAlgError:
            return False
        return True


def make_transform(tag, d=None):
    if tag == "identity":
        return Identity()
    if tag == "log":
        return Log()
    if tag == "scaled_logit":
        return ScaledLogit()
    if tag == "cholesky_spd":
        return CholeskySPD(d)
    raise ConfigurationError(f"unknown transform {tag!r}")


# --------------------------------------------------------------------- priors

@dataclass(frozen=True)
class Prior:
    """Prior density for one parameter block.

    ``scale='natural'`` means the density is on the transformed value;
    ``'unconstrained'`` puts it on the sampler's coordinate directly.
    """

    family: str
    a: float = 0.0
    b: float = 1.0
    scale: str = "natural"

    def __post_init__(self):
        if self.family not in ("normal", "uniform", "lognormal", "flat"):
            raise ConfigurationError(f"unknown prior family {self.family!r}")
        if self.family in ("normal", "lognormal") and not self.b > 0:
            raise ConfigurationError("prior scale must be positive")
        if self.family == "uniform" and not self.b > self.a:
            raise ConfigurationError("uniform prior needs lower < upper")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.family == "flat":
            return 0.0
        if self.family == "normal":
            return float(np.sum(stats.norm.logpdf(x, self.a, self.b)))
        if self.family == "uniform":
            if np.any((x < self.a) | (x > self.b)):
                return -np.inf
            return -x.size * np.log(self.b - self.a)
        if np.any(x <= 0):
            return -np.inf
        return float(np.sum(stats.lognorm.logpdf(x, s=self.b, scale=np.exp(self.a))))

    def median(self):
        if self.family in ("normal", "flat"):
            return self.a
        if self.family == "uniform":
            return 0.5 * (self.a + self.b)
        return float(np.exp(self.a))

    def describe(self):
        if self.family == "flat":
            return "Flat()"
        label = {"normal": "Normal", "uniform": "Uniform", "lognormal": "LogNormal"}[self.family]
        where = "" if self.scale == "natural" else " [unconstrained]"
        return f"{label}({self.a:g}, {self.b:g}){where}"


def parse_prior(spec) -> Prior:
    """Build a prior from a mapping or a short string like ``'uniform(0, 50)'``."""
    if isinstance(spec, Prior):
        return spec
    if isinstance(spec, Mapping):
        return Prior(**spec)
    if isinstance(spec, str):
        text = spec.strip().lower()
        if text in ("flat", "flat()"):
            return Prior("flat")
        try:
            fam, rest = text.split("(", 1)
            a, b = (float(v) for v in rest.rstrip(")").split(","))
        except ValueError as exc:
            raise ConfigurationError(f"cannot parse prior {spec!r}") from exc
        return Prior(fam.strip(), a, b)
    raise ConfigurationError(f"cannot parse prior {spec!r}")


# --------------------------------------------------------------------- layout

@dataclass(frozen=True)
class ParamInfo:
    name: str
    size: int
    transform: Transform
    prior: Prior
    mean_only: bool = False  # enters the likelihood only through mu(.)
    shape: Tuple[int, ...] = ()

    @property
    def natural_shape(self):
        return self.shape if self.shape else ((self.size,) if self.size > 1 else ())


class ParamLayout:
    """Ordered named blocks of the unconstrained parameter vector.

    Parameters named in ``fixed`` are held at a natural-scale constant and
    excluded from the sampled vector.
    """

    def __init__(self, params: Sequence[ParamInfo], fixed: Optional[Mapping[str, object]] = None):
        self.all_params = list(params)
        names = [p.name for p in self.all_params]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate parameter names in layout")
        fixed = dict(fixed or {})
        unknown = set(fixed) - set(names)
        if unknown:
            raise ConfigurationError(f"fixed values given for unknown parameters: {sorted(unknown)}")
        self.fixed: Dict[str, np.ndarray] = {}
        self.params = []
        self.slices: Dict[str, slice] = {}
        pos = 0
        for p in self.all_params:
            if p.name in fixed:
                val = np.asarray(fixed[p.name], dtype=float)
                if val.size != p.size and not (p.shape and val.shape == p.shape):
                    raise ConfigurationError(f"fixed value for {p.name} has wrong size")
                self.fixed[p.name] = val.reshape(p.natural_shape) if val.size == p.size and not p.shape else val
                continue
            self.params.append(p)
            self.slices[p.name] = slice(pos, pos + p.size)
            pos += p.size
        self.size = pos
        self.info = {p.name: p for p in self.all_params}
        mean_idx = [np.arange(self.slices[p.name].start, self.slices[p.name].stop)
                    for p in self.params if p.mean_only]
        self.mean_mask = np.zeros(self.size, dtype=bool)
        if mean_idx:
            self.mean_mask[np.concatenate(mean_idx)] = True

    @property
    def names(self):
        return [p.name for p in self.params]

    def __contains__(self, name):
        return name in self.info

    def coord_names(self):
        """Scalar labels for every unconstrained coordinate, e.g. ``beta[1]``."""
        out = []
        for p in self.params:
            if p.size == 1:
                out.append(p.name)
            else:
                out.extend(f"{p.name}[{i}]" for i in range(p.size))
        return out

    def natural_names(self):
        """Column labels matching :meth:`ThetaState.natural_vector`.

        Matrix parameters are labelled by their lower-triangle entries.
        """
        out = []
        for p in self.params:
            if isinstance(p.transform, CholeskySPD):
                t = p.transform
                out.extend(f"{p.name}[{r},{c}]" for r, c in zip(t.rows, t.cols))
            elif p.size == 1:
                out.append(p.name)
            else:
                out.extend(f"{p.name}[{i}]" for i in range(p.size))
        return out

    def state_from_natural_vector(self, vec) -> "ThetaState":
        """Inverse of :meth:`ThetaState.natural_vector`."""
        vec = np.asarray(vec, dtype=float).ravel()
        u = np.empty(self.size)
        pos = 0
        for p in self.params:
            vals = vec[pos:pos + p.size]
            pos += p.size
            if isinstance(p.transform, CholeskySPD):
                t = p.transform
                M = np.zeros((t.d, t.d))
                M[t.rows, t.cols] = vals
                M[t.cols, t.rows] = vals
                u[self.slices[p.name]] = t.inverse(M)
            else:
                u[self.slices[p.name]] = np.ravel(p.transform.inverse(vals if p.size > 1 else vals[0]))
        if pos != vec.size:
            raise ConfigurationError(f"natural vector has {vec.size} values, layout expects {pos}")
        return ThetaState(self, u)

    def resolve(self, target: str) -> np.ndarray:
        """Indices for ``name`` or ``name[i]`` / ``name[i,j]`` / ``name[i:j]``."""
        target = target.strip()
        if "[" in target:
            base, rest = target.split("[", 1)
            body = rest.rstrip("]")
        else:
            base, body = target, None
        if base not in self.slices:
            raise ConfigurationError(f"sampler target {target!r} is not a sampled parameter")
        sl = self.slices[base]
        idx = np.arange(sl.start, sl.stop)
        if body is None:
            return idx
        picked = []
        for part in body.split(","):
            part = part.strip()
            if ":" in part:
                lo, hi = part.split(":")
                picked.extend(range(int(lo or 0), int(hi) if hi else idx.size))
            else:
                picked.append(int(part))
        picked = np.asarray(picked, dtype=int)
        if np.any(picked < 0) or np.any(picked >= idx.size):
            raise ConfigurationError(f"index out of range in sampler target {target!r}")
        return idx[picked]

    def state(self, u) -> "ThetaState":
        return ThetaState(self, np.asarray(u, dtype=float))

    def from_natural(self, values: Mapping[str, object], default=None) -> "ThetaState":
        """Unconstrained state from natural-scale values; missing ones from ``default``."""
        u = np.empty(self.size)
        for p in self.params:
            if p.name in values:
                v = np.asarray(values[p.name], dtype=float)
                uv = p.transform.inverse(v)
            elif default is not None:
                uv = default.block(p.name)
            else:
                raise ConfigurationError(f"no value supplied for parameter {p.name!r}")
            uv = np.ravel(uv)
            if uv.size != p.size:
                raise ConfigurationError(f"parameter {p.name} expects {p.size} values, got {uv.size}")
            u[self.slices[p.name]] = uv
        return ThetaState(self, u)

    def prior_median_state(self) -> "ThetaState":
        u = np.empty(self.size)
        for p in self.params:
            med = p.prior.median()
            if p.prior.scale == "unconstrained":
                u[self.slices[p.name]] = med
            else:
                u[self.slices[p.name]] = np.ravel(p.transform.inverse(np.full(p.size, med)))
        return ThetaState(self, u)

    def log_prior(self, theta: "ThetaState"):
        """Sum of log prior densities plus transform log-Jacobians.

        Returns ``(value, offending_name)``; the name is set when the value is
        ``-inf``.
        """
        total = 0.0
        for p in self.params:
            u = theta.block(p.name)
            if p.prior.scale == "unconstrained":
                lp = p.prior.logpdf(u)
            else:
                lp = p.prior.logpdf(theta[p.name])
                if np.isfinite(lp):
                    lp += p.transform.log_jacobian(u)
            if not np.isfinite(lp):
                return -np.inf, p.name
            total += lp
        return total, None

    def describe_priors(self):
        return {p.name: p.prior.describe() for p in self.params}


class ThetaState:
    """Immutable snapshot of the unconstrained vector with named access.

    ``theta[name]`` gives the natural-scale value (fixed values included);
    ``theta.block(name)`` gives the unconstrained block.
    """

    __slots__ = ("layout", "u", "_cache")

    def __init__(self, layout: ParamLayout, u):
        u = np.array(u, dtype=float)
        if u.shape != (layout.size,):
            raise ConfigurationError(f"state vector has length {u.size}, layout expects {layout.size}")
        u.flags.writeable = False
        self.layout = layout
        self.u = u
        self._cache = {}

    def block(self, name):
        return self.u[self.layout.slices[name]]

    def __getitem__(self, name):
        if name in self._cache:
            return self._cache[name]
        lay = self.layout
        if name in lay.fixed:
            val = lay.fixed[name]
        elif name in lay.slices:
            p = lay.info[name]
            val = p.transform.forward(self.block(name))
            if p.natural_shape == ():
                val = float(np.ravel(val)[0]) if np.ndim(val) else float(val)
        else:
            raise ConfigurationError(f"parameter {name!r} is required by the model but missing")
        self._cache[name] = val
        return val

    def __contains__(self, name):
        return name in self.layout.fixed or name in self.layout.slices

    def replace(self, idx, values) -> "ThetaState":
        u = self.u.copy()
        u[idx] = values
        return ThetaState(self.layout, u)

    def natural_vector(self):
        """Flattened natural-scale values aligned with ``layout.coord_names()``."""
        out = []
        for p in self.layout.params:
            out.append(np.ravel(self[p.name]) if not isinstance(p.transform, CholeskySPD)
                       else p.transform.forward(self.block(p.name))[p.transform.rows, p.transform.cols])
        return np.concatenate(out) if out else np.empty(0)

    def as_dict(self):
        names = list(self.layout.fixed) + self.layout.names
        return {n: self[n] for n in names}
