"""Adaptive Metropolis and slice samplers over the marginal posterior.

A scheme is a list of :class:`SamplerSpec`; each iteration sweeps the
samplers in order. Proposals live on the unconstrained scale. Scales are
tuned every ``interval`` iterations during burn-in with a Robbins-Monro
step that decays as ``m ** -0.5`` (``m`` = number of adaptations so far)
and are frozen afterwards.
"""
from __future__ import annotations

import logging
import math
import sys
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .errors import ConfigurationError, DomainError, IllConditionedKernelError, NumericalError
from .likelihood import DEFAULT_DENSE_CAP, LikelihoodEngine
from .params import ParamLayout, ThetaState
from .processes import ModelSpec, SpatialData, build_layout, initial_state

log = logging.getLogger(__name__)

SAMPLER_KINDS = ("rw", "block_rw", "slice")
TARGET_ACCEPT = {"rw": 0.44, "slice": None, "block_rw": 0.234}
ADAPT_INTERVAL = 200
PROGRESS_EVERY = 1000
CACHE_CHECK_EVERY = 1000
MAX_SHRINK = 1000
MAX_STEP_OUT = 100
_FAILURES = (NumericalError, IllConditionedKernelError, DomainError, np.linalg.LinAlgError, FloatingPointError)


@dataclass
class SamplerSpec:
    """One sampler: its kind, the parameter names it updates and its start scale.

    ``targets`` accepts whole parameters (``'tau'``) or elements
    (``'Sigma_w[3]'``, ``'beta[0:2]'``).
    """

    kind: str
    targets: List[str]
    scale: float = 1.0
    interval: int = ADAPT_INTERVAL
    target_accept: Optional[float] = None

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ConfigurationError(f"unknown sampler kind {self.kind!r}; choose from {SAMPLER_KINDS}")
        if isinstance(self.targets, str):
            self.targets = [self.targets]
        self.targets = list(self.targets)
        if not self.targets:
            raise ConfigurationError("a sampler needs at least one target")
        if not self.scale > 0:
            raise ConfigurationError("sampler scale must be positive")
        if self.interval < 1:
            raise ConfigurationError("adaptation interval must be positive")
        if self.target_accept is None:
            self.target_accept = TARGET_ACCEPT[self.kind]


# ------------------------------------------------------------- posterior

class LogPosterior:
    """Marginal log-posterior ``log p(z | theta) + log p(theta)`` on the unconstrained scale.

    Numerical failures in the likelihood count as ``-inf`` and are logged.
    """

    def __init__(self, engine: LikelihoodEngine, layout: ParamLayout):
        self.engine = engine
        self.layout = layout
        self.n_failures = 0

    def prior(self, theta: ThetaState):
        return self.layout.log_prior(theta)

    def __call__(self, theta: ThetaState) -> float:
        lp, _ = self.layout.log_prior(theta)
        if not np.isfinite(lp):
            return -np.inf
        try:
            ll = self.engine.loglik(theta)
        except _FAILURES as exc:
            self.n_failures += 1
            log.warning("likelihood failed, proposal rejected: %s", exc)
            return -np.inf
        if not np.isfinite(ll):
            return -np.inf
        return float(ll + lp)

    def fresh(self, theta: ThetaState) -> float:
        """Evaluate without any cached factor (used for coherence checks)."""
        saved = dict(self.engine._cache)
        self.engine.clear_cache()
        try:
            return self(theta)
        finally:
            self.engine._cache = saved


def log_posterior(theta: ThetaState, model: ModelSpec, data: SpatialData, dense_cap=DEFAULT_DENSE_CAP, seed=0):
    """One-off evaluation of the log-posterior (builds a fresh engine)."""
    engine = LikelihoodEngine(model, data, dense_cap=dense_cap, seed=seed)
    return LogPosterior(engine, theta.layout)(theta)


# ------------------------------------------------------------- samplers

class _Sampler:
    """Shared adaptation bookkeeping."""

    def __init__(self, spec: SamplerSpec, idx: np.ndarray):
        self.spec = spec
        self.idx = idx
        self.n_adapt = 0
        self.adapting = True
        self.accepted = 0
        self.proposed = 0
        self.win_acc = 0
        self.win_prop = 0
        self.win_iter = 0

    @property
    def label(self):
        return f"{self.spec.kind}:{','.join(self.spec.targets)}"

    def acceptance(self):
        return self.accepted / self.proposed if self.proposed else float("nan")

    def _gamma(self):
        self.n_adapt += 1
        return self.n_adapt ** -0.5

    def end_iteration(self, theta):
        self.win_iter += 1
        if self.adapting and self.win_iter >= self.spec.interval:
            self.adapt()
            self.win_acc = self.win_prop = self.win_iter = 0

    def adapt(self):
        pass

    def freeze(self):
        self.adapting = False


class RandomWalk(_Sampler):
    """Univariate Gaussian random walk on each targeted coordinate in turn."""

    def __init__(self, spec, idx):
        super().__init__(spec, idx)
        self.log_scale = np.full(idx.size, np.log(spec.scale))
        self.c_acc = np.zeros(idx.size)
        self.c_prop = np.zeros(idx.size)

    def step(self, theta, lp, post, rng):
        for a, i in enumerate(self.idx):
            prop = theta.u[i] + math.exp(self.log_scale[a]) * rng.standard_normal()
            cand = theta.replace(i, prop)
            lp_c = post(cand)
            self.proposed += 1
            self.c_prop[a] += 1
            if np.log(rng.uniform()) < lp_c - lp:
                theta, lp = cand, lp_c
                self.accepted += 1
                self.c_acc[a] += 1
        return theta, lp

    def adapt(self):
        g = self._gamma()
        rate = self.c_acc / np.maximum(self.c_prop, 1)
        self.log_scale += 10.0 * g * (rate - self.spec.target_accept)
        self.c_acc[:] = 0
        self.c_prop[:] = 0

    @property
    def scales(self):
        return np.exp(self.log_scale)


class BlockRandomWalk(_Sampler):
    """Multivariate Gaussian random walk with an adapted proposal covariance."""

    def __init__(self, spec, idx):
        super().__init__(spec, idx)
        d = idx.size
        self.log_scale = np.log(spec.scale * 2.38 / np.sqrt(d))
        self.cov = np.eye(d)
        self.chol = np.eye(d)
        self.window = []

    def step(self, theta, lp, post, rng):
        z = rng.standard_normal(self.idx.size)
        prop = theta.u[self.idx] + math.exp(self.log_scale) * (self.chol @ z)
        cand = theta.replace(self.idx, prop)
        lp_c = post(cand)
        self.proposed += 1
        self.win_prop += 1
        if np.log(rng.uniform()) < lp_c - lp:
            theta, lp = cand, lp_c
            self.accepted += 1
            self.win_acc += 1
        return theta, lp

    def end_iteration(self, theta):
        if self.adapting:
            self.window.append(theta.u[self.idx].copy())
        super().end_iteration(theta)

    def adapt(self):
        g = self._gamma()
        rate = self.win_acc / max(self.win_prop, 1)
        self.log_scale += 10.0 * g * (rate - self.spec.target_accept)
        W = np.asarray(self.window)
        self.window = []
        if W.shape[0] > 1 and rate > 0:
            emp = np.atleast_2d(np.cov(W, rowvar=False))
            self.cov = self.cov + g * (emp - self.cov)
            try:
                self.chol = np.linalg.cholesky(self.cov + 1e-10 * np.eye(self.idx.size))
            except np.linalg.LinAlgError:
                pass

    def freeze(self):
        super().freeze()
        self.window = []


class Slice(_Sampler):
    """Stepping-out and shrinkage slice sampler.

    Univariate: a spec naming several coordinates updates them one at a
    time. The starting width is the adapted width, tuned toward twice the
    mean jump size.
    """

    def __init__(self, spec, idx):
        super().__init__(spec, idx)
        self.width = np.full(idx.size, float(spec.scale))
        self.jumps = np.zeros(idx.size)

    def step(self, theta, lp, post, rng):
        for a, i in enumerate(self.idx):
            x0 = theta.u[i]
            w = self.width[a]
            logy = lp + np.log(rng.uniform())

            def f(x):
                return post(theta.replace(i, x))

            left = x0 - w * rng.uniform()
            right = left + w
            j = int(rng.integers(0, MAX_STEP_OUT))
            kk = MAX_STEP_OUT - 1 - j
            while j > 0 and f(left) > logy:
                left -= w
                j -= 1
            while kk > 0 and f(right) > logy:
                right += w
                kk -= 1
            for _ in range(MAX_SHRINK):
                x1 = left + (right - left) * rng.uniform()
                cand = theta.replace(i, x1)
                lp_c = post(cand)
                if lp_c > logy:
                    break
                if x1 < x0:
                    left = x1
                else:
                    right = x1
            else:
                raise NumericalError("slice sampler failed to shrink onto the slice", target=self.label)
            self.jumps[a] += abs(x1 - x0)
            self.proposed += 1
            self.accepted += 1
            theta, lp = cand, lp_c
        return theta, lp

    def adapt(self):
        g = self._gamma()
        mean_jump = self.jumps / self.win_iter
        ok = mean_jump > 0
        self.width[ok] = np.exp(np.log(self.width[ok]) + g * (np.log(2.0 * mean_jump[ok]) - np.log(self.width[ok])))
        self.jumps[:] = 0


_CLASSES = {"rw": RandomWalk, "block_rw": BlockRandomWalk, "slice": Slice}


def build_samplers(scheme: Sequence[SamplerSpec], layout: ParamLayout):
    """Resolve targets to coordinates; every coordinate must be covered once."""
    seen = np.zeros(layout.size, dtype=int)
    out = []
    for spec in scheme:
        idx = np.unique(np.concatenate([layout.resolve(t) for t in spec.targets]))
        seen[idx] += 1
        out.append(_CLASSES[spec.kind](spec, idx))
    if np.any(seen > 1):
        dup = [layout.coord_names()[i] for i in np.flatnonzero(seen > 1)]
        raise ConfigurationError(f"parameters covered by more than one sampler: {dup}")
    if np.any(seen == 0):
        miss = [layout.coord_names()[i] for i in np.flatnonzero(seen == 0)]
        raise ConfigurationError(f"parameters not covered by any sampler: {miss}")
    return out


# ------------------------------------------------------------- schemes

def _knots_for(name, model: ModelSpec):
    target = name.split("_", 1)[0]
    return model.process(target).knots


def knot_groups(knots, block_size, seed=0):
    """Partition knot indices into about ``ceil(K / block_size)`` spatial groups."""
    knots = np.asarray(knots, dtype=float)
    K = knots.shape[0]
    n_groups = int(math.ceil(K / block_size))
    if n_groups <= 1:
        return [np.arange(K)]
    _, labels = kmeans2(knots, n_groups, minit="++", seed=np.random.default_rng(seed))
    return [np.flatnonzero(labels == g) for g in range(n_groups) if np.any(labels == g)]


def default_scheme(layout: ParamLayout, model: ModelSpec, block_size=8, joint=False, hyper="rw",
                   covariance_block=False, seed=0) -> List[SamplerSpec]:
    """A sampling scheme in the sub-block family.

    Latent basis weights are split into spatial sub-blocks of about
    ``block_size`` knots (k-means on knot coordinates). With ``joint`` the
    three anisotropy weight vectors share their sub-blocks. Latent-GP
    hyperparameters use ``hyper`` ('rw' or 'slice'); with
    ``covariance_block`` all remaining covariance parameters move together.
    """
    if hyper not in ("rw", "slice"):
        raise ConfigurationError("hyperparameter sampler must be 'rw' or 'slice'")
    scheme = []
    names = layout.names
    w_names = [n for n in names if n.endswith("_w")]
    done = set()
    joint_aniso = [n for n in ("Sigma_eig1_w", "Sigma_eig2_w", "Sigma_angle_w") if n in w_names]
    if joint and joint_aniso:
        groups = knot_groups(model.Sigma.knots, block_size, seed)
        for g in groups:
            tg = [f"{n}[{','.join(str(int(i)) for i in g)}]" for n in joint_aniso]
            scheme.append(SamplerSpec("block_rw", tg, scale=0.1))
        done.update(joint_aniso)
    for n in w_names:
        if n in done:
            continue
        groups = knot_groups(_knots_for(n, model), block_size, seed)
        for g in groups:
            scheme.append(SamplerSpec("block_rw", [f"{n}[{','.join(str(int(i)) for i in g)}]"], scale=0.1))
        done.add(n)
    rest_cov = []
    for n in names:
        if n in done:
            continue
        info = layout.info[n]
        if "_gp_" in n:
            scheme.append(SamplerSpec(hyper, [n], scale=0.5 if hyper == "rw" else 1.0))
        elif info.mean_only:
            scheme.append(SamplerSpec("block_rw" if info.size > 1 else "rw", [n], scale=0.5))
        elif covariance_block:
            rest_cov.append(n)
        elif info.size > 1 and n not in ("Sigma_eig",):
            scheme.append(SamplerSpec("block_rw", [n], scale=0.2))
        else:
            scheme.append(SamplerSpec("rw", [n], scale=0.5))
    if rest_cov:
        scheme.append(SamplerSpec("block_rw", rest_cov, scale=0.2))
    return scheme


# ------------------------------------------------------------- chains

@dataclass
class PosteriorSamples:
    """Retained draws (unconstrained scale) with their layout and run metadata."""

    layout: ParamLayout
    u: np.ndarray
    log_post: np.ndarray
    iterations: int
    burnin: int
    thin: int
    seed: Optional[int]
    wall_time: float
    acceptance: Dict[str, float] = field(default_factory=dict)
    n_failures: int = 0

    def __post_init__(self):
        expected = (self.iterations - self.burnin) // self.thin
        if self.u.shape[0] != expected:
            raise ValueError(f"retained {self.u.shape[0]} draws, expected {expected}")

    @property
    def n(self):
        return self.u.shape[0]

    @property
    def names(self):
        return self.layout.natural_names()

    def state(self, l) -> ThetaState:
        return self.layout.state(self.u[l])

    def states(self, every=1):
        return [self.state(l) for l in range(0, self.n, every)]

    def natural(self):
        """Draws on the natural scale, one column per ``names`` entry."""
        if self.n == 0:
            return np.empty((0, len(self.names)))
        return np.vstack([self.state(l).natural_vector() for l in range(self.n)])

    def column(self, name):
        return self.natural()[:, self.names.index(name)]

    @classmethod
    def from_natural(cls, layout, values, **meta):
        """Rebuild from a natural-scale draw matrix (e.g. a samples file)."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        u = np.array([layout.state_from_natural_vector(r).u for r in values]).reshape(-1, layout.size)
        n = u.shape[0]
        meta.setdefault("iterations", n)
        meta.setdefault("burnin", 0)
        meta.setdefault("thin", 1)
        meta.setdefault("seed", None)
        meta.setdefault("wall_time", 0.0)
        return cls(layout=layout, u=u, log_post=np.full(n, np.nan), **meta)


def _check_initial(post: LogPosterior, theta: ThetaState):
    lp, bad = post.prior(theta)
    if not np.isfinite(lp):
        raise ConfigurationError(f"initial state has zero prior density (parameter {bad!r})")
    val = post(theta)
    if not np.isfinite(val):
        raise NumericalError("initial state has zero posterior density (likelihood failed)")
    return val


def run_chain(model: ModelSpec, data: SpatialData, scheme=None, iterations=1000, burnin=500, thin=1,
              seed=0, init=None, layout=None, engine=None, progress: Optional[Callable] = None,
              dense_cap=DEFAULT_DENSE_CAP, progress_every=PROGRESS_EVERY) -> PosteriorSamples:
    """Run one adaptive MCMC chain.

    Parameters
    ----------
    scheme : list of SamplerSpec, optional
        Defaults to :func:`default_scheme`.
    init : ThetaState or str or mapping, optional
        A state, ``'moment'``/``'median'``, or natural-scale overrides on the
        moment start.
    progress : callable, optional
        Receives one text line every ``progress_every`` iterations; defaults
        to writing on standard error.
    """
    if iterations < 0 or burnin < 0 or burnin > iterations:
        raise ConfigurationError("need 0 <= burnin <= iterations")
    if thin < 1:
        raise ConfigurationError("thin must be >= 1")
    layout = layout or build_layout(model, data)
    engine = engine or LikelihoodEngine(model, data, dense_cap=dense_cap, seed=seed)
    post = LogPosterior(engine, layout)
    if isinstance(init, ThetaState):
        theta = init
    elif isinstance(init, str) or init is None:
        theta = initial_state(model, data, layout, method=init or "moment")
    else:
        theta = initial_state(model, data, layout, overrides=init)
    scheme = default_scheme(layout, model, seed=seed) if scheme is None else scheme
    samplers = build_samplers(scheme, layout)
    if progress is None:
        def progress(line):
            print(line, file=sys.stderr, flush=True)

    rng = np.random.default_rng(seed)
    lp = _check_initial(post, theta)
    n_keep = (iterations - burnin) // thin
    kept_u = np.empty((n_keep, layout.size))
    kept_lp = np.empty(n_keep)
    t0 = time.perf_counter()
    j = 0
    for it in range(1, iterations + 1):
        if it == burnin + 1:
            for s in samplers:
                s.freeze()
        for s in samplers:
            theta, lp = s.step(theta, lp, post, rng)
            s.end_iteration(theta)
        if it > burnin and (it - burnin) % thin == 0 and j < n_keep:
            kept_u[j] = theta.u
            kept_lp[j] = lp
            j += 1
        if it % CACHE_CHECK_EVERY == 0:
            fresh = post.fresh(theta)
            if not abs(fresh - lp) <= 1e-8 * max(1.0, abs(lp)):
                raise NumericalError("cached log-posterior disagrees with a fresh evaluation",
                                     iteration=it, cached=lp, fresh=fresh)
        if progress_every and it % progress_every == 0:
            rates = " ".join(f"{s.label}={s.acceptance():.2f}" for s in samplers)
            progress(f"iter {it}/{iterations} log_post={lp:.4f} accept[{rates}]")
    wall = time.perf_counter() - t0
    return PosteriorSamples(
        layout=layout, u=kept_u, log_post=kept_lp, iterations=iterations, burnin=burnin, thin=thin,
        seed=seed, wall_time=wall, acceptance={s.label: s.acceptance() for s in samplers},
        n_failures=post.n_failures,
    )


# ------------------------------------------------------------- diagnostics

def autocovariance(x):
    """Biased autocovariance at all lags via FFT."""
    x = np.asarray(x, dtype=float)
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov


def effective_sample_size(x):
    """ESS with Geyer's initial positive sequence truncation.

    Returns ``(ess, constant)``; a constant chain gives ``(0.0, True)``.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n < 10:
        raise ConfigurationError("effective sample size needs at least 10 draws")
    acov = autocovariance(x)
    if not acov[0] > 1e-300 or np.ptp(x) == 0:
        return 0.0, True
    rho = acov / acov[0]
    # pair sums Gamma_m = rho_{2m} + rho_{2m+1}; keep while positive
    n_pairs = (n - 1) // 2
    gam = rho[0:2 * n_pairs:2] + rho[1:2 * n_pairs + 1:2]
    neg = np.flatnonzero(gam <= 0)
    m = neg[0] if neg.size else gam.size
    tau = -1.0 + 2.0 * np.sum(gam[:m])
    tau = max(tau, 1.0 / np.log10(max(n, 10)))
    return float(n / tau), False


@dataclass
class EfficiencyRow:
    name: str
    ess: float
    ess_per_sec: float
    constant: bool


def efficiency_report(samples):
    """Per-parameter ESS and ESS per second, and the minimum efficiency.

    ``samples`` is one :class:`PosteriorSamples` or a list of chains; with
    several chains ESS and wall times are summed.
    """
    chains = samples if isinstance(samples, (list, tuple)) else [samples]
    names = chains[0].names
    wall = sum(c.wall_time for c in chains)
    mats = [c.natural() for c in chains]
    rows = []
    for p, name in enumerate(names):
        ess, const = 0.0, True
        for D in mats:
            e, k = effective_sample_size(D[:, p])
            ess += e
            const = const and k
        rows.append(EfficiencyRow(name, ess, ess / wall if wall > 0 else float("nan"), const))
    live = [r for r in rows if not r.constant]
    min_eff = min((r.ess_per_sec for r in live), default=0.0)
    return rows, min_eff
