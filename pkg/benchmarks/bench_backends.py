"""Compare the compiled kernels against the numpy fallback.

Times the dense covariance block, the batched local regressions and one
full NNGP likelihood evaluation under each available backend, and checks
that both backends return the same numbers.

    python3 benchmarks/bench_backends.py --n 2000 --k 15
"""
import argparse
import time

import numpy as np

from nsgp import _backend
from nsgp.likelihood import LikelihoodEngine, _local
from nsgp.bench import bench_state
from nsgp.covariance import cov_matrix
from nsgp.processes import ModelSpec, SpatialData, build_layout


def _median_time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def run(n, k, nu, repeats, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, 2))
    z = rng.standard_normal(n)
    model = ModelSpec(likelihood="NNGP", k=k, nu=nu)
    data = SpatialData(X, z)
    layout = build_layout(model, data)
    theta = bench_state(layout)
    engine = LikelihoodEngine(model, data, seed=seed)
    field = engine.field(theta)
    sub = field.take(np.arange(min(n, 1000)))
    nbr = engine.graph.nbr
    latent = np.ones(nbr.shape, dtype=np.uint8)

    results, outputs = {}, {}
    for name in _backend.available():
        prev = _backend.use(name)
        try:
            outputs[name] = (cov_matrix(sub, model.matern), _local(field, model.matern, nbr, latent, "bench")[0],
                             engine.loglik(theta))

            def loglik():
                engine.clear_cache()
                engine.loglik(theta)

            results[name] = {
                f"cov_block ({sub.n}x{sub.n})": _median_time(lambda: cov_matrix(sub, model.matern), repeats),
                f"local_regressions (N={n}, k={k})": _median_time(
                    lambda: _local(field, model.matern, nbr, latent, "bench"), repeats),
                f"NNGP loglik (N={n})": _median_time(loglik, repeats),
            }
        finally:
            _backend.use(prev)
    return results, outputs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--k", type=int, default=15)
    ap.add_argument("--nu", type=float, default=0.5)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    results, outputs = run(args.n, args.k, args.nu, args.repeats)
    names = list(results)
    print(f"{'operation':<36}" + "".join(f"{b:>14}" for b in names) + ("     speedup" if len(names) > 1 else ""))
    for op in results[names[0]]:
        row = [results[b][op] for b in names]
        line = f"{op:<36}" + "".join(f"{t * 1e3:>12.3f}ms" for t in row)
        if len(names) > 1:
            line += f"{row[1] / row[0]:>11.1f}x"
        print(line)
    if len(names) > 1:
        a, b = outputs[names[0]], outputs[names[1]]
        diff = max(float(np.max(np.abs(a[0] - b[0]))), float(np.max(np.abs(a[1] - b[1]))), abs(a[2] - b[2]))
        print(f"max abs difference between backends: {diff:.2e}")
    else:
        print("compiled extension not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
