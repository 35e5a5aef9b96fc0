"""Run configuration: schema, loading and conversion into model objects.

Configs are YAML files with the blocks ``model``, ``data``, ``mcmc``,
``predict``, ``simulate``, ``cv`` and ``bench``. Unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError, DataError
from .mcmc import SamplerSpec, default_scheme
from .params import parse_prior
from .processes import GP_KINDS, LEGAL_KINDS, REGRESSION_KINDS, TARGETS, ModelSpec, ProcessModelSpec, SpatialData
from .simulate import grid_knots


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class KnotConfig(_Strict):
    """Knots as a grid over the data bounding box, explicit points or a CSV file."""

    grid: Optional[List[int]] = None
    points: Optional[List[List[float]]] = None
    file: Optional[str] = None

    @model_validator(mode="after")
    def _one_source(self):
        given = [v is not None for v in (self.grid, self.points, self.file)]
        if sum(given) != 1:
            raise ValueError("knots need exactly one of grid, points or file")
        return self


class ModelConfig(_Strict):
    mu_model: str = "constant"
    tau_model: str = "constant"
    sigma_model: str = "constant"
    Sigma_model: str = "constant"
    likelihood: Literal["fullGP", "NNGP", "SGV"] = "fullGP"
    k: int = Field(15, ge=1)
    nu: float = Field(0.5, gt=0)
    nu_phi: float = Field(5.0, gt=0)
    eigen_cap: Optional[float] = Field(None, gt=0)
    sgv_strategy: str = "sgv"
    scale_upper: float = Field(100.0, gt=0)
    gp_range_upper: float = Field(10.0, gt=0)
    priors: Dict[str, Union[str, Dict[str, Union[str, float]]]] = {}
    fixed: Dict[str, Union[float, List[float], List[List[float]]]] = {}
    knots: Dict[str, KnotConfig] = {}
    covariates: Dict[str, List[str]] = {}
    intercept: bool = True

    @model_validator(mode="after")
    def _legal(self):
        for t in TARGETS:
            kind = getattr(self, f"{t}_model")
            if kind not in LEGAL_KINDS[t]:
                raise ValueError(
                    f"process kind {kind!r} is not allowed for target {t!r}; "
                    f"choose from {', '.join(LEGAL_KINDS[t])}"
                )
            if kind in GP_KINDS and t not in self.knots:
                raise ValueError(f"{t}_model {kind!r} needs knots.{t}")
            if kind in REGRESSION_KINDS and not self.covariates.get(t):
                raise ValueError(f"{t}_model {kind!r} needs covariates.{t}")
        for t in list(self.knots) + list(self.covariates):
            if t not in TARGETS:
                raise ValueError(f"unknown process target {t!r}")
        for name, spec in self.priors.items():
            try:
                parse_prior(spec)
            except ConfigurationError as exc:
                raise ValueError(f"prior for {name}: {exc}") from None
        return self


class DataConfig(_Strict):
    coords: List[str] = ["x", "y"]
    response: str = "z"


class SamplerConfig(_Strict):
    kind: Literal["rw", "block_rw", "slice"]
    targets: List[str]
    scale: float = Field(1.0, gt=0)


class SchemeConfig(_Strict):
    block_size: int = Field(8, ge=1)
    joint: bool = False
    hyper: Literal["rw", "slice"] = "rw"
    covariance_block: bool = False


class MCMCConfig(_Strict):
    iterations: int = Field(2000, ge=0)
    burnin: int = Field(1000, ge=0)
    thin: int = Field(1, ge=1)
    seed: int = 0
    init: Literal["moment", "median"] = "moment"
    init_values: Dict[str, Union[float, List[float], List[List[float]]]] = {}
    scheme: Union[SchemeConfig, List[SamplerConfig]] = SchemeConfig()

    @model_validator(mode="after")
    def _burn(self):
        if self.burnin > self.iterations:
            raise ValueError("burnin exceeds iterations")
        return self


class PredictConfig(_Strict):
    target: Literal["y", "z"] = "z"
    joint: bool = False
    every: int = Field(10, ge=1)
    save_draws: bool = False


class SimulateConfig(_Strict):
    n: int = Field(200, ge=1)
    domain: List[Tuple[float, float]] = [(0.0, 1.0), (0.0, 1.0)]
    truth: Dict[str, Union[float, List[float], List[List[float]]]] = {}


class CVConfig(_Strict):
    folds: int = Field(10, ge=2)
    iterations: int = Field(2000, ge=0)
    burnin: int = Field(1000, ge=0)
    thin: int = Field(1, ge=1)
    every: int = Field(10, ge=1)


class BenchConfig(_Strict):
    sizes: List[int] = [100, 1000, 2000, 4000, 8000]
    kinds: List[Literal["fullGP", "NNGP", "SGV"]] = ["fullGP", "NNGP", "SGV"]
    repeats: int = Field(5, ge=1)
    k: int = Field(15, ge=1)
    nu: float = Field(0.5, gt=0)


class RunConfig(_Strict):
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    mcmc: MCMCConfig = MCMCConfig()
    predict: PredictConfig = PredictConfig()
    simulate: SimulateConfig = SimulateConfig()
    cv: CVConfig = CVConfig()
    bench: BenchConfig = BenchConfig()

    def hash(self):
        """Short stable hash of the full configuration."""
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def parse_config(obj) -> RunConfig:
    try:
        return RunConfig.model_validate(obj or {})
    except ValidationError as exc:
        lines = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    try:
        obj = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from None
    if obj is not None and not isinstance(obj, dict):
        raise ConfigurationError("config must be a mapping of blocks")
    return parse_config(obj)


# ------------------------------------------------------------ conversion

def resolve_knots(kc: KnotConfig, coords):
    if kc.grid is not None:
        return grid_knots(coords, kc.grid)
    if kc.points is not None:
        return np.asarray(kc.points, dtype=float)
    try:
        return np.loadtxt(kc.file, delimiter=",", ndmin=2, comments="#")
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"cannot read knots file {kc.file}: {exc}") from None


def build_model(cfg: RunConfig, coords) -> ModelSpec:
    m = cfg.model
    procs = {}
    for t in TARGETS:
        kind = getattr(m, f"{t}_model")
        knots = resolve_knots(m.knots[t], coords) if kind in GP_KINDS else None
        procs[t] = ProcessModelSpec(t, kind, knots)
    return ModelSpec(
        **procs, likelihood=m.likelihood, k=m.k, nu=m.nu, nu_phi=m.nu_phi, eigen_cap=m.eigen_cap,
        sgv_strategy=m.sgv_strategy, scale_upper=m.scale_upper, gp_range_upper=m.gp_range_upper,
        priors=dict(m.priors), fixed={k: np.asarray(v, dtype=float) for k, v in m.fixed.items()},
    )


def build_scheme(cfg: RunConfig, layout, model, seed=0):
    sc = cfg.mcmc.scheme
    if isinstance(sc, SchemeConfig):
        return default_scheme(layout, model, block_size=sc.block_size, joint=sc.joint, hyper=sc.hyper,
                              covariance_block=sc.covariance_block, seed=seed)
    return [SamplerSpec(s.kind, list(s.targets), s.scale) for s in sc]


def covariate_columns(cfg: RunConfig):
    """Raw data columns needed by the covariate terms (``a*b`` uses a and b)."""
    cols = []
    for terms in cfg.model.covariates.values():
        for term in terms:
            for c in term.split("*"):
                c = c.strip()
                if c not in cols:
                    cols.append(c)
    return cols


def design_matrices(cfg: RunConfig, frame, standardize=False, stats=None):
    """Per-target design matrices from a data frame.

    With ``standardize`` each raw covariate column is centred and scaled
    (by ``stats`` when given, else by the frame's own mean and SD) before
    interaction terms are formed. Returns ``(designs, stats)``.
    """
    raw = covariate_columns(cfg)
    missing = [c for c in raw if c not in frame.columns]
    if missing:
        raise DataError(f"covariate columns missing from data: {missing}")
    values = {}
    new_stats = {} if stats is None else dict(stats)
    for c in raw:
        col = np.asarray(frame[c], dtype=float)
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise DataError(f"missing or non-finite value in column {c!r} at row {int(bad[0]) + 1}")
        if standardize:
            if stats is None:
                sd = float(col.std(ddof=1)) if col.size > 1 else 1.0
                new_stats[c] = (float(col.mean()), sd if sd > 0 else 1.0)
            mean, sd = new_stats[c]
            col = (col - mean) / sd
        values[c] = col
    designs = {}
    n = len(frame)
    for target, terms in cfg.model.covariates.items():
        cols = [np.ones(n)] if cfg.model.intercept else []
        for term in terms:
            parts = [p.strip() for p in term.split("*")]
            col = np.ones(n)
            for p in parts:
                col = col * values[p]
            cols.append(col)
        designs[target] = np.column_stack(cols)
    return designs, (new_stats if standardize else {})


def frame_to_data(cfg: RunConfig, frame, with_response=True, standardize=False, stats=None):
    cols = list(cfg.data.coords)
    missing = [c for c in cols if c not in frame.columns]
    if with_response and cfg.data.response not in frame.columns:
        missing.append(cfg.data.response)
    if missing:
        raise DataError(f"columns missing from data: {missing}")
    coords = np.asarray(frame[cols], dtype=float)
    bad = np.flatnonzero(~np.all(np.isfinite(coords), axis=1))
    if bad.size:
        raise DataError(f"missing or non-finite coordinate at row {int(bad[0]) + 1}")
    z = None
    if with_response:
        z = np.asarray(frame[cfg.data.response], dtype=float)
        bad = np.flatnonzero(~np.isfinite(z))
        if bad.size:
            raise DataError(f"missing or non-finite response at row {int(bad[0]) + 1}")
    designs, stats = design_matrices(cfg, frame, standardize, stats)
    return SpatialData(coords, z, designs), stats
