"""Prediction scores and k-fold cross-validation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

import numpy as np
from scipy.stats import norm

from .errors import ConfigurationError, DomainError, ShapeError

_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


def score_mspe(pred_means, truth):
    """Mean squared prediction error."""
    p = np.asarray(pred_means, dtype=float).ravel()
    t = np.asarray(truth, dtype=float).ravel()
    if p.size == 0:
        raise ConfigurationError("MSPE of an empty prediction set")
    if p.size != t.size:
        raise ShapeError("predictions and truth differ in length")
    return float(np.mean((p - t) ** 2))


def score_crps_empirical(draws, y):
    """CRPS of the empirical distribution of ``draws`` at ``y``.

    ``draws`` is (L,) for one site or (L, M) for M sites (then ``y`` has M
    entries and an array of M scores is returned). Uses the sorted form
    ``sum_i (2i - L - 1) x_(i) / L^2`` for the pairwise term.
    """
    x = np.asarray(draws, dtype=float)
    single = x.ndim == 1
    x = x[:, None] if single else x
    L = x.shape[0]
    if L < 1:
        raise ConfigurationError("CRPS needs at least one draw")
    yy = np.broadcast_to(np.asarray(y, dtype=float), (x.shape[1],))
    first = np.mean(np.abs(x - yy[None, :]), axis=0)
    xs = np.sort(x, axis=0)
    w = (2.0 * np.arange(1, L + 1) - L - 1)[:, None]
    second = np.sum(w * xs, axis=0) / L ** 2
    out = first - second
    return float(out[0]) if single else out


def crps_empirical_naive(draws, y):
    """O(L^2) reference form of :func:`score_crps_empirical` for one site."""
    x = np.asarray(draws, dtype=float).ravel()
    L = x.size
    return float(np.mean(np.abs(x - y)) - np.sum(np.abs(x[:, None] - x[None, :])) / (2.0 * L * L))


def score_crps_gaussian(mu, sd, y):
    """Closed-form CRPS of a normal predictive distribution."""
    mu, sd, y = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sd, y)))
    if np.any(sd <= 0):
        raise DomainError("predictive SD must be positive")
    w = (y - mu) / sd
    out = sd * (w * (2.0 * norm.cdf(w) - 1.0) + 2.0 * norm.pdf(w) - _INV_SQRT_PI)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------ folds

@dataclass(frozen=True)
class FoldPlan:
    """Fold label (1..F) for every observation."""

    fold: np.ndarray
    seed: Optional[int]

    @classmethod
    def make(cls, n, n_folds, seed=0):
        if not 2 <= n_folds <= n:
            raise ConfigurationError(f"need 2 <= folds <= N (got {n_folds} folds for N={n})")
        perm = np.random.default_rng(seed).permutation(n)
        fold = np.empty(n, dtype=int)
        fold[perm] = np.arange(n) % n_folds + 1
        return cls(fold, seed)

    @property
    def n_folds(self):
        return int(self.fold.max())

    def split(self, f):
        test = np.flatnonzero(self.fold == f)
        train = np.flatnonzero(self.fold != f)
        return train, test


@dataclass
class FoldScore:
    fold: int
    n_test: int
    mspe: float
    crps: float


@dataclass
class CVResult:
    folds: List[FoldScore]

    @property
    def mspe(self):
        return np.array([f.mspe for f in self.folds])

    @property
    def crps(self):
        return np.array([f.crps for f in self.folds])

    def aggregate(self):
        """Mean and across-fold SD (denominator F - 1) of each score."""
        ddof = 1 if len(self.folds) > 1 else 0
        return {
            "mspe_mean": float(self.mspe.mean()), "mspe_sd": float(self.mspe.std(ddof=ddof)),
            "crps_mean": float(self.crps.mean()), "crps_sd": float(self.crps.std(ddof=ddof)),
        }


def score_fold(draws, truth):
    """(MSPE, mean empirical CRPS) of a predictive draw matrix against held-out values."""
    D = draws.draws if hasattr(draws, "draws") else np.asarray(draws, dtype=float)
    return score_mspe(D.mean(axis=0), truth), float(np.mean(score_crps_empirical(D, truth)))


def cross_validate(data, model, folds: FoldPlan, iterations=2000, burnin=1000, thin=1, seed=0,
                   every=10, scheme_fn: Optional[Callable] = None, dense_cap=None,
                   progress: Optional[Callable] = None) -> CVResult:
    """Refit on each fold's complement, predict the held-out responses and score.

    ``scheme_fn(layout, model)`` builds the sampling scheme per fold (defaults
    to :func:`nsgp.mcmc.default_scheme`). Ordering and neighbor structures
    are rebuilt from each training set.
    """
    from .likelihood import DEFAULT_DENSE_CAP, LikelihoodEngine
    from .mcmc import default_scheme, run_chain
    from .predict import PredictionRequest, predict
    from .processes import build_layout

    dense_cap = DEFAULT_DENSE_CAP if dense_cap is None else dense_cap
    if data.z is None:
        raise ConfigurationError("cross-validation needs responses")
    if folds.fold.size != data.n:
        raise ShapeError("fold plan does not match the data size")
    need = model.k + 1 if model.likelihood != "fullGP" else 2
    out = []
    for f in range(1, folds.n_folds + 1):
        train_idx, test_idx = folds.split(f)
        if train_idx.size < need:
            raise ConfigurationError(f"fold {f} leaves {train_idx.size} training points; need at least {need}")
        train = data.subset(train_idx)
        test = data.subset(test_idx)
        layout = build_layout(model, train)
        scheme = (scheme_fn or (lambda lay, m: default_scheme(lay, m, seed=seed)))(layout, model)
        engine = LikelihoodEngine(model, train, dense_cap=dense_cap, seed=seed)
        samples = run_chain(model, train, scheme, iterations, burnin, thin, seed=seed + f,
                            layout=layout, engine=engine, progress=progress or (lambda line: None))
        request = PredictionRequest(test.coords, test.designs, target="z")
        draws = predict(samples, request, train, model, seed=seed + f, every=every, engine=engine,
                        dense_cap=dense_cap)
        mspe, crps = score_fold(draws, test.z)
        out.append(FoldScore(f, int(test_idx.size), mspe, crps))
    return CVResult(out)
