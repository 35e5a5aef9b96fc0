"""Command-line interface: simulate, fit, predict, cv and bench.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__, _backend
from .config import (
    RunConfig,
    build_model,
    build_scheme,
    covariate_columns,
    design_matrices,
    frame_to_data,
    load_config,
)
from .errors import ConfigurationError, DataError, NumericalError, ShapeError
from .likelihood import DEFAULT_DENSE_CAP, LikelihoodEngine
from .mcmc import PosteriorSamples, efficiency_report, run_chain
from .processes import build_layout, initial_state
from .scoring import FoldPlan, cross_validate

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
FLOAT = "%.17g"


def _say(msg):
    print(msg, file=sys.stderr, flush=True)


def _header(cfg: RunConfig, seed, **extra):
    items = {"config_hash": cfg.hash(), "seed": seed, **extra}
    return "".join(f"# {k}={v}\n" for k, v in items.items())


def _write_csv(path, frame: pd.DataFrame, header: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(header)
        frame.to_csv(fh, index=False, float_format=FLOAT, lineterminator="\n")


def _read_csv(path):
    try:
        return pd.read_csv(path, comment="#")
    except FileNotFoundError:
        raise DataError(f"data file not found: {path}") from None
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from None


def _read_header(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, val = line[1:].strip().partition("=")
            out[key.strip()] = val.strip()
    return out


def file_fingerprint(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _dense_cap(args):
    cap = DEFAULT_DENSE_CAP if args.dense_cap is None else int(args.dense_cap)
    if cap > DEFAULT_DENSE_CAP and not args.allow_large_dense:
        raise ConfigurationError(
            f"--dense-cap above {DEFAULT_DENSE_CAP} needs --allow-large-dense (dense work grows as N^3)"
        )
    return cap


def _seed(args, cfg):
    return cfg.mcmc.seed if args.seed is None else int(args.seed)


def _coordinate_notes(cfg, data, model):
    X = data.coords
    if X.shape[1] == 2 and np.all(np.abs(X[:, 0]) <= 180) and np.all(np.abs(X[:, 1]) <= 90) \
            and np.ptp(X, axis=0).max() > 5:
        _say("note: coordinates look like longitude/latitude degrees; they are treated as planar")
    if model.likelihood == "fullGP":
        _, counts = np.unique(X, axis=0, return_counts=True)
        tau_zero = "tau" in model.fixed and np.all(np.asarray(model.fixed["tau"]) == 0)
        if np.any(counts > 1) and tau_zero:
            warnings.warn("duplicate coordinates with a zero nugget make the exact covariance singular",
                          RuntimeWarning, stacklevel=2)
            _say("warning: duplicate coordinates with tau fixed at 0; the exact covariance is singular")


# ------------------------------------------------------------ simulate

def cmd_simulate(args, cfg: RunConfig):
    from .simulate import simulate, uniform_coords

    seed = _seed(args, cfg)
    rng = np.random.default_rng(seed)
    sim_cfg = cfg.simulate
    coords = uniform_coords(sim_cfg.n, sim_cfg.domain, rng)
    cov_cols = covariate_columns(cfg)
    frame = pd.DataFrame(coords, columns=cfg.data.coords[: coords.shape[1]])
    for c in cov_cols:
        frame[c] = rng.standard_normal(sim_cfg.n)
    designs, _ = design_matrices(cfg, frame)
    model = build_model(cfg, coords)
    sim = simulate(model, sim_cfg.truth, coords=coords, designs=designs, seed=int(rng.integers(2 ** 31)),
                   dense_cap=_dense_cap(args))
    frame[cfg.data.response] = sim.data.z
    frame["y_latent"] = sim.y
    out = Path(args.out or "simulated.csv")
    _write_csv(out, frame, _header(cfg, seed))
    truth = {k: np.asarray(v).tolist() for k, v in sim_cfg.truth.items()}
    sidecar = out.with_suffix(out.suffix + ".truth.json")
    sidecar.write_text(json.dumps({"config_hash": cfg.hash(), "seed": seed, "truth": truth}, indent=2, sort_keys=True) + "\n")
    _say(f"wrote {len(frame)} rows to {out}")
    return EXIT_OK


# ------------------------------------------------------------ fit

def _load_training(cfg, path, standardize, stats=None):
    if path is None:
        raise ConfigurationError("--data is required")
    frame = _read_csv(path)
    data, stats = frame_to_data(cfg, frame, True, standardize, stats)
    return data, stats


def _fit_report(cfg, model, layout, samples, data_fp, seed, standardize_stats):
    rows, min_eff = efficiency_report(samples) if samples.n >= 10 else ([], float("nan"))
    lines = [
        f"nsgp {__version__} fit report",
        f"config_hash: {cfg.hash()}",
        f"model_fingerprint: {model.fingerprint()}",
        f"data_fingerprint: {data_fp}",
        f"seed: {seed}",
        f"backend: {_backend.name}",
        f"likelihood: {model.likelihood}",
        f"iterations: {samples.iterations}  burnin: {samples.burnin}  thin: {samples.thin}  retained: {samples.n}",
        f"wall_time_seconds: {samples.wall_time:.3f}",
        f"likelihood_failures: {samples.n_failures}",
        "",
        "priors:",
    ]
    lines += [f"  {k}: {v}" for k, v in layout.describe_priors().items()]
    if layout.fixed:
        lines.append("fixed:")
        lines += [f"  {k}: {np.asarray(v).tolist()}" for k, v in layout.fixed.items()]
    if standardize_stats:
        lines.append("standardized covariates (mean, sd):")
        lines += [f"  {k}: {v[0]:.6g}, {v[1]:.6g}" for k, v in standardize_stats.items()]
    lines += ["", "acceptance rates:"]
    lines += [f"  {k}: {v:.3f}" for k, v in samples.acceptance.items()]
    lines += ["", "effective sample size (per second):"]
    lines += [f"  {r.name}: {r.ess:.1f} ({r.ess_per_sec:.3f}/s){' constant' if r.constant else ''}" for r in rows]
    lines.append(f"min_ess_per_second: {min_eff:.4f}")
    return "\n".join(lines) + "\n"


def cmd_fit(args, cfg: RunConfig):
    seed = _seed(args, cfg)
    cap = _dense_cap(args)
    data, stats = _load_training(cfg, args.data, args.standardize_covariates)
    model = build_model(cfg, data.coords)
    _coordinate_notes(cfg, data, model)
    layout = build_layout(model, data)
    scheme = build_scheme(cfg, layout, model, seed)
    engine = LikelihoodEngine(model, data, dense_cap=cap, seed=seed)
    init = initial_state(model, data, layout, cfg.mcmc.init, dict(cfg.mcmc.init_values))
    samples = run_chain(model, data, scheme, cfg.mcmc.iterations, cfg.mcmc.burnin, cfg.mcmc.thin, seed=seed,
                        init=init, layout=layout, engine=engine, progress=_say)
    out = Path(args.out or "fit")
    out.mkdir(parents=True, exist_ok=True)
    data_fp = file_fingerprint(args.data)
    frame = pd.DataFrame(samples.natural(), columns=samples.names)
    _write_csv(out / "samples.csv", frame,
               _header(cfg, seed, model_fingerprint=model.fingerprint(), data_fingerprint=data_fp))
    meta = {
        "config_hash": cfg.hash(), "seed": seed, "model_fingerprint": model.fingerprint(),
        "data": str(Path(args.data).resolve()), "data_fingerprint": data_fp,
        "standardize": bool(args.standardize_covariates), "standardize_stats": stats,
        "iterations": samples.iterations, "burnin": samples.burnin, "thin": samples.thin,
    }
    (out / "fit.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(_fit_report(cfg, model, layout, samples, data_fp, seed, stats))
    _say(f"wrote {samples.n} draws to {out / 'samples.csv'}")
    return EXIT_OK


# ------------------------------------------------------------ predict

def cmd_predict(args, cfg: RunConfig):
    from .predict import PredictionRequest, predict, summarize

    fit_dir = Path(args.samples or "fit")
    try:
        meta = json.loads((fit_dir / "fit.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read fit metadata in {fit_dir}: {exc}") from None
    seed = _seed(args, cfg)
    cap = _dense_cap(args)
    stats = meta.get("standardize_stats") or None
    data_fp = file_fingerprint(meta["data"]) if Path(meta["data"]).exists() else "missing"
    if data_fp != meta["data_fingerprint"]:
        raise DataError(
            f"training data changed since the fit: fitted on {meta['data_fingerprint']}, "
            f"found {data_fp}; refusing to predict"
        )
    train, _ = _load_training(cfg, meta["data"], meta["standardize"], stats)
    model = build_model(cfg, train.coords)
    head = _read_header(fit_dir / "samples.csv")
    if head.get("model_fingerprint") != model.fingerprint():
        raise ConfigurationError(
            f"samples were fitted with model {head.get('model_fingerprint')} but the config gives "
            f"{model.fingerprint()}; refusing to predict"
        )
    layout = build_layout(model, train)
    frame = _read_csv(fit_dir / "samples.csv")
    if list(frame.columns) != layout.natural_names():
        raise DataError("samples file columns do not match the model parameters")
    samples = PosteriorSamples.from_natural(layout, frame.to_numpy(dtype=float))
    if args.data is None:
        raise ConfigurationError("--data (prediction sites) is required")
    pframe = _read_csv(args.data)
    if len(pframe):
        pdata, _ = frame_to_data(cfg, pframe, with_response=False, standardize=meta["standardize"], stats=stats)
        sites, pdesigns = pdata.coords, pdata.designs
    else:
        sites = np.empty((0, train.dim))
        pdesigns, _ = design_matrices(cfg, pframe, meta["standardize"], stats)
    request = PredictionRequest(sites, pdesigns, target=cfg.predict.target, joint=cfg.predict.joint)
    if model.likelihood == "NNGP" and request.joint:
        raise ConfigurationError("NNGP prediction is marginal only; set predict.joint: false")
    engine = None if model.likelihood == "fullGP" else LikelihoodEngine(model, train, dense_cap=cap, seed=meta["seed"])
    draws = predict(samples, request, train, model, seed=seed, every=cfg.predict.every, engine=engine, dense_cap=cap)
    out = Path(args.out or "predict")
    out.mkdir(parents=True, exist_ok=True)
    if draws.draws.shape[1] and draws.draws.shape[0] >= 2:
        mean, sd = summarize(draws)
    else:
        mean = sd = np.empty(draws.draws.shape[1])
    summary = pd.DataFrame(sites, columns=cfg.data.coords[: train.dim])
    summary["mean"] = mean
    summary["sd"] = sd
    hdr = _header(cfg, seed, model_fingerprint=model.fingerprint(), target=cfg.predict.target,
                  draws=draws.draws.shape[0])
    _write_csv(out / "summary.csv", summary, hdr)
    if cfg.predict.save_draws:
        cols = [f"site{j}" for j in range(draws.draws.shape[1])]
        _write_csv(out / "draws.csv", pd.DataFrame(draws.draws, columns=cols), hdr)
    _say(f"wrote predictions for {request.m} sites to {out / 'summary.csv'}")
    return EXIT_OK


# ------------------------------------------------------------ cv

def cmd_cv(args, cfg: RunConfig):
    seed = _seed(args, cfg)
    cap = _dense_cap(args)
    data, _ = _load_training(cfg, args.data, args.standardize_covariates)
    model = build_model(cfg, data.coords)
    n_folds = args.folds or cfg.cv.folds
    folds = FoldPlan.make(data.n, n_folds, seed)
    res = cross_validate(
        data, model, folds, cfg.cv.iterations, cfg.cv.burnin, cfg.cv.thin, seed=seed, every=cfg.cv.every,
        scheme_fn=lambda lay, m: build_scheme(cfg, lay, m, seed), dense_cap=cap,
    )
    table = pd.DataFrame([{"fold": f.fold, "n_test": f.n_test, "mspe": f.mspe, "crps": f.crps} for f in res.folds])
    agg = res.aggregate()
    table = pd.concat([table, pd.DataFrame([
        {"fold": "mean", "n_test": int(table.n_test.sum()), "mspe": agg["mspe_mean"], "crps": agg["crps_mean"]},
        {"fold": "sd", "n_test": int(table.n_test.sum()), "mspe": agg["mspe_sd"], "crps": agg["crps_sd"]},
    ])], ignore_index=True)
    out = Path(args.out or "cv.csv")
    _write_csv(out, table, _header(cfg, seed, model_fingerprint=model.fingerprint(), folds=n_folds))
    _say(f"wrote {n_folds}-fold scores to {out}")
    return EXIT_OK


# ------------------------------------------------------------ bench

def cmd_bench(args, cfg: RunConfig):
    from .bench import bench_likelihoods

    seed = _seed(args, cfg)
    cap = _dense_cap(args)
    b = cfg.bench
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else b.sizes
    rows = bench_likelihoods(sizes, b.kinds, b.repeats, b.k, b.nu, seed, cap)
    table = pd.DataFrame([{"kind": r.kind, "n": r.n, "median_seconds": r.median, "repeats": r.repeats,
                           "note": r.note} for r in rows])
    out = Path(args.out or "bench.csv")
    _write_csv(out, table, _header(cfg, seed, backend=_backend.name))
    for r in rows:
        _say(f"{r.kind:>7} N={r.n:>6} median={r.median:.6f}s {r.note}")
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict, "cv": cmd_cv, "bench": cmd_bench}


def build_parser():
    parser = argparse.ArgumentParser(prog="nsgp", description="Nonstationary spatial Gaussian process toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run configuration")
        p.add_argument("--data", help="input CSV (training data, or prediction sites for predict)")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--seed", type=int, help="overrides mcmc.seed")
        p.add_argument("--threads", type=int, help="cap on BLAS/OpenMP worker threads")
        p.add_argument("--standardize-covariates", action="store_true",
                       help="centre and scale covariate columns before building designs")
        p.add_argument("--dense-cap", type=int, help=f"largest N for dense work (default {DEFAULT_DENSE_CAP})")
        p.add_argument("--allow-large-dense", action="store_true",
                       help="acknowledge a dense cap above the default")
        if name == "predict":
            p.add_argument("--samples", help="fit output directory (default: fit)")
        if name == "cv":
            p.add_argument("--folds", type=int, help="number of folds (overrides cv.folds)")
        if name == "bench":
            p.add_argument("--sizes", help="comma-separated sample sizes")
    return parser


def _threads(n):
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        with _threads(args.threads):
            return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        _say(f"configuration error: {exc}")
        return EXIT_CONFIG
    except (DataError, ShapeError) as exc:
        _say(f"data error: {exc}")
        return EXIT_DATA
    except NumericalError as exc:
        _say(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
