"""Timing of single likelihood evaluations across sample sizes."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from .likelihood import DEFAULT_DENSE_CAP, LikelihoodEngine
from .processes import ModelSpec, SpatialData, build_layout


@dataclass
class BenchRow:
    kind: str
    n: int
    median: float
    repeats: int
    note: str = ""


def bench_state(layout):
    """A fixed stationary parameter state used for timing."""
    return layout.from_natural({"beta": [0.0], "tau": 0.3, "sigma": 1.0,
                                "Sigma_eig": [0.02, 0.01], "Sigma_angle": 0.6})


def time_loglik(kind, n, k=15, nu=0.5, repeats=5, seed=0, dense_cap=DEFAULT_DENSE_CAP):
    """Median wall time of one full likelihood evaluation (factorization included).

    Ordering and neighbor search are set-up costs and are not timed.
    """
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    z = rng.standard_normal(n)
    model = ModelSpec(likelihood=kind, k=k, nu=nu)
    data = SpatialData(X, z)
    layout = build_layout(model, data)
    theta = bench_state(layout)
    engine = LikelihoodEngine(model, data, dense_cap=dense_cap, seed=seed)
    engine.loglik(theta)  # warm caches (basis, allocations)
    times = []
    for _ in range(repeats):
        engine.clear_cache()
        t0 = time.perf_counter()
        engine.loglik(theta)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def bench_likelihoods(sizes: Sequence[int], kinds=("fullGP", "NNGP", "SGV"), repeats=5, k=15, nu=0.5,
                      seed=0, dense_cap=DEFAULT_DENSE_CAP) -> List[BenchRow]:
    rows = []
    for kind in kinds:
        for n in sizes:
            if kind == "fullGP" and n > dense_cap:
                rows.append(BenchRow(kind, int(n), float("nan"), 0, f"skipped: above dense cap {dense_cap}"))
                continue
            rows.append(BenchRow(kind, int(n), time_loglik(kind, int(n), k, nu, repeats, seed, dense_cap), repeats))
    return rows
