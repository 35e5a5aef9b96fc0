import json

import numpy as np
import pandas as pd
import pytest

from nsgp.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from nsgp.config import build_model, load_config
from nsgp.mcmc import PosteriorSamples
from nsgp.predict import PredictionRequest, predict, summarize
from nsgp.processes import SpatialData, build_layout

CONFIG = """
model:
  likelihood: {lik}
  k: 6
  nu: 0.5
mcmc:
  iterations: 60
  burnin: 20
predict:
  target: z
  every: 4
simulate:
  n: 40
  truth: {{beta: [0.5], tau: 0.3, sigma: 1.0, Sigma_eig: [0.04, 0.01], Sigma_angle: 0.6}}
cv:
  folds: 2
  iterations: 30
  burnin: 10
  every: 4
bench:
  sizes: [50]
  repeats: 1
"""


def write_config(tmp_path, lik="fullGP", extra=""):
    p = tmp_path / f"{lik}.yaml"
    p.write_text(CONFIG.format(lik=lik) + extra)
    return str(p)


def read(path):
    return pd.read_csv(path, comment="#")


@pytest.fixture
def fitted(tmp_path):
    cfg = write_config(tmp_path)
    data, fit = tmp_path / "sim.csv", tmp_path / "fit"
    assert main(["simulate", "--config", cfg, "--out", str(data), "--seed", "3"]) == EXIT_OK
    assert main(["fit", "--config", cfg, "--data", str(data), "--out", str(fit), "--seed", "4"]) == EXIT_OK
    sites = tmp_path / "sites.csv"
    pd.DataFrame({"x": [0.2, 0.7, 0.4], "y": [0.3, 0.1, 0.9]}).to_csv(sites, index=False)
    return tmp_path, cfg, data, fit, sites


class TestSimulate:
    def test_outputs(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "s.csv"
        assert main(["simulate", "--config", cfg, "--out", str(out), "--seed", "1"]) == EXIT_OK
        text = out.read_text()
        assert text.startswith("# config_hash=") and "# seed=1" in text
        df = read(out)
        assert list(df.columns) == ["x", "y", "z", "y_latent"] and len(df) == 40
        truth = json.loads((tmp_path / "s.csv.truth.json").read_text())
        assert truth["truth"]["tau"] == 0.3

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = write_config(tmp_path)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["simulate", "--config", cfg, "--out", str(a), "--seed", "9"])
        main(["simulate", "--config", cfg, "--out", str(b), "--seed", "9"])
        assert a.read_bytes() == b.read_bytes()


class TestFitPredict:
    def test_fit_outputs(self, fitted):
        _, _, _, fit, _ = fitted
        meta = json.loads((fit / "fit.json").read_text())
        assert meta["seed"] == 4 and meta["iterations"] == 60
        samples = read(fit / "samples.csv")
        assert len(samples) == 40 and "tau" in samples.columns
        report = (fit / "report.txt").read_text()
        assert "acceptance rates" in report and "min_ess_per_second" in report

    def test_predict_matches_library(self, fitted):
        tmp, cfg_path, data, fit, sites = fitted
        out = tmp / "pred"
        assert main(["predict", "--config", cfg_path, "--data", str(sites), "--samples", str(fit),
                     "--out", str(out), "--seed", "5"]) == EXIT_OK
        summary = read(out / "summary.csv")

        cfg = load_config(cfg_path)
        train = read(data)
        td = SpatialData(train[["x", "y"]].to_numpy(), train["z"].to_numpy())
        model = build_model(cfg, td.coords)
        lay = build_layout(model, td)
        s = PosteriorSamples.from_natural(lay, read(fit / "samples.csv").to_numpy())
        P = read(sites)[["x", "y"]].to_numpy()
        d = predict(s, PredictionRequest(P, target="z"), td, model, seed=5, every=4)
        mean, sd = summarize(d)
        np.testing.assert_allclose(summary["mean"], mean, atol=1e-12)
        np.testing.assert_allclose(summary["sd"], sd, atol=1e-12)

    def test_changed_data_refused(self, fitted):
        tmp, cfg, data, fit, sites = fitted
        with open(data, "a") as fh:
            fh.write("0.5,0.5,0.0,0.0\n")
        assert main(["predict", "--config", cfg, "--data", str(sites), "--samples", str(fit),
                     "--out", str(tmp / "p")]) == EXIT_DATA

    def test_changed_model_refused(self, fitted, capsys):
        tmp, _, _, fit, sites = fitted
        other = write_config(tmp, "NNGP")
        assert main(["predict", "--config", other, "--data", str(sites), "--samples", str(fit),
                     "--out", str(tmp / "p")]) == EXIT_CONFIG
        assert "refusing" in capsys.readouterr().err

    def test_no_sites(self, fitted):
        tmp, cfg, _, fit, _ = fitted
        empty = tmp / "empty.csv"
        empty.write_text("x,y\n")
        assert main(["predict", "--config", cfg, "--data", str(empty), "--samples", str(fit),
                     "--out", str(tmp / "p")]) == EXIT_OK
        df = read(tmp / "p" / "summary.csv")
        assert len(df) == 0 and list(df.columns) == ["x", "y", "mean", "sd"]

    def test_save_draws(self, fitted):
        tmp, _, data, fit, sites = fitted
        cfg = write_config(tmp, extra="")
        text = open(cfg).read().replace("every: 4\nsimulate", "every: 4\n  save_draws: true\nsimulate")
        open(cfg, "w").write(text)
        assert main(["predict", "--config", cfg, "--data", str(sites), "--samples", str(fit),
                     "--out", str(tmp / "p")]) == EXIT_OK
        assert read(tmp / "p" / "draws.csv").shape == (10, 3)


class TestErrors:
    def test_nan_row(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        bad = tmp_path / "bad.csv"
        pd.DataFrame({"x": [0.1, 0.2, 0.3], "y": [0.1, 0.5, 0.9], "z": [1.0, np.nan, 0.0]}).to_csv(bad, index=False)
        assert main(["fit", "--config", cfg, "--data", str(bad), "--out", str(tmp_path / "f")]) == EXIT_DATA
        assert "row 2" in capsys.readouterr().err

    def test_missing_data_file(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["fit", "--config", cfg, "--data", str(tmp_path / "none.csv")]) == EXIT_DATA

    def test_config_errors(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("model:\n  mu_model: covReg\n")
        assert main(["simulate", "--config", str(p), "--out", str(tmp_path / "s.csv")]) == EXIT_CONFIG
        err = capsys.readouterr().err
        assert "covReg" in err and "mu" in err

    def test_dense_cap_needs_acknowledgement(self, tmp_path):
        cfg = write_config(tmp_path)
        out = str(tmp_path / "s.csv")
        assert main(["simulate", "--config", cfg, "--out", out, "--dense-cap", "9000"]) == EXIT_CONFIG
        assert main(["simulate", "--config", cfg, "--out", out, "--dense-cap", "9000",
                     "--allow-large-dense"]) == EXIT_OK

    def test_nngp_joint(self, tmp_path):
        cfg = write_config(tmp_path, "NNGP")
        data, fit = tmp_path / "sim.csv", tmp_path / "fit"
        main(["simulate", "--config", cfg, "--out", str(data)])
        main(["fit", "--config", cfg, "--data", str(data), "--out", str(fit)])
        text = open(cfg).read().replace("target: z", "target: z\n  joint: true")
        open(cfg, "w").write(text)
        assert main(["predict", "--config", cfg, "--data", str(data), "--samples", str(fit),
                     "--out", str(tmp_path / "p")]) == EXIT_CONFIG


class TestNotes:
    def test_geographic_note(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        rng = np.random.default_rng(0)
        df = pd.DataFrame({"x": rng.uniform(-120, -80, 20), "y": rng.uniform(30, 45, 20), "z": rng.normal(size=20)})
        df.to_csv(tmp_path / "geo.csv", index=False)
        assert main(["fit", "--config", cfg, "--data", str(tmp_path / "geo.csv"),
                     "--out", str(tmp_path / "f")]) == EXIT_OK
        assert "longitude/latitude" in capsys.readouterr().err

    def test_duplicate_sites_warning(self, tmp_path, capsys):
        cfg = write_config(tmp_path, extra="")
        text = open(cfg).read().replace("nu: 0.5", "nu: 0.5\n  fixed: {tau: 0.0}")
        open(cfg, "w").write(text)
        df = pd.DataFrame({"x": [0.1, 0.1, 0.5, 0.9], "y": [0.2, 0.2, 0.5, 0.1], "z": [1.0, 1.1, 0.0, -1.0]})
        df.to_csv(tmp_path / "dup.csv", index=False)
        with pytest.warns(RuntimeWarning, match="duplicate"):
            main(["fit", "--config", cfg, "--data", str(tmp_path / "dup.csv"), "--out", str(tmp_path / "f")])
        assert "duplicate" in capsys.readouterr().err


class TestCVBench:
    def test_cv(self, fitted):
        tmp, cfg, data, _, _ = fitted
        out = tmp / "cv.csv"
        assert main(["cv", "--config", cfg, "--data", str(data), "--out", str(out)]) == EXIT_OK
        df = read(out)
        assert list(df["fold"].astype(str)) == ["1", "2", "mean", "sd"]
        assert np.all(np.isfinite(df["crps"]))

    def test_bench(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "b.csv"
        assert main(["bench", "--config", cfg, "--out", str(out), "--sizes", "30,60", "--threads", "1"]) == EXIT_OK
        df = read(out)
        assert len(df) == 6 and set(df["kind"]) == {"fullGP", "NNGP", "SGV"}
        assert np.all(df["median_seconds"] > 0)
