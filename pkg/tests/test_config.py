import numpy as np
import pandas as pd
import pytest

from nsgp.config import (
    RunConfig,
    build_model,
    build_scheme,
    covariate_columns,
    design_matrices,
    frame_to_data,
    load_config,
    parse_config,
)
from nsgp.errors import ConfigurationError, DataError
from nsgp.processes import build_layout


class TestParse:
    def test_defaults(self):
        cfg = parse_config({})
        assert cfg.model.likelihood == "fullGP" and cfg.mcmc.iterations == 2000

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError, match="bogus"):
            parse_config({"model": {"bogus": 1}})
        with pytest.raises(ConfigurationError):
            parse_config({"extra_block": {}})

    def test_illegal_pair_names_kind_and_target(self):
        with pytest.raises(ConfigurationError) as err:
            parse_config({"model": {"mu_model": "covReg"}})
        assert "covReg" in str(err.value) and "'mu'" in str(err.value)

    def test_gp_needs_knots(self):
        with pytest.raises(ConfigurationError, match="knots"):
            parse_config({"model": {"sigma_model": "approxGP"}})

    def test_regression_needs_covariates(self):
        with pytest.raises(ConfigurationError, match="covariates"):
            parse_config({"model": {"tau_model": "logLinReg"}})

    def test_knot_source_exclusive(self):
        with pytest.raises(ConfigurationError):
            parse_config({"model": {"sigma_model": "approxGP",
                                    "knots": {"sigma": {"grid": [2, 2], "points": [[0, 0]]}}}})

    def test_bad_prior(self):
        with pytest.raises(ConfigurationError, match="prior"):
            parse_config({"model": {"priors": {"tau": "wobbly(1)"}}})

    def test_burnin(self):
        with pytest.raises(ConfigurationError, match="burnin"):
            parse_config({"mcmc": {"iterations": 10, "burnin": 20}})

    def test_hash_stable(self):
        a = parse_config({"model": {"nu": 1.5}})
        assert a.hash() == parse_config({"model": {"nu": 1.5}}).hash() != RunConfig().hash()


class TestLoad:
    def test_yaml(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("model:\n  likelihood: NNGP\n  k: 7\n")
        cfg = load_config(p)
        assert cfg.model.likelihood == "NNGP" and cfg.model.k == 7

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_config(tmp_path / "nope.yaml")
        p = tmp_path / "bad.yaml"
        p.write_text("model: [unclosed\n")
        with pytest.raises(ConfigurationError):
            load_config(p)
        p.write_text("- a\n- b\n")
        with pytest.raises(ConfigurationError):
            load_config(p)

    def test_none(self):
        assert load_config(None) == RunConfig()


@pytest.fixture
def frame():
    rng = np.random.default_rng(0)
    return pd.DataFrame({"x": rng.uniform(size=12), "y": rng.uniform(size=12), "z": rng.normal(size=12),
                         "a": rng.normal(3, 2, size=12), "b": rng.normal(size=12)})


class TestDesigns:
    def cfg(self):
        return parse_config({"model": {"mu_model": "linReg", "tau_model": "logLinReg",
                                       "covariates": {"mu": ["a", "a*b"], "tau": ["b"]}}})

    def test_interaction(self, frame):
        cfg = self.cfg()
        assert covariate_columns(cfg) == ["a", "b"]
        D, _ = design_matrices(cfg, frame)
        np.testing.assert_allclose(D["mu"], np.column_stack([np.ones(12), frame.a, frame.a * frame.b]))
        assert D["tau"].shape == (12, 2)

    def test_standardize_before_interaction(self, frame):
        D, stats = design_matrices(self.cfg(), frame, standardize=True)
        a = (frame.a - frame.a.mean()) / frame.a.std(ddof=1)
        b = (frame.b - frame.b.mean()) / frame.b.std(ddof=1)
        np.testing.assert_allclose(D["mu"][:, 2], a * b)
        assert stats["a"][0] == pytest.approx(frame.a.mean())
        # reuse training statistics on new rows
        D2, _ = design_matrices(self.cfg(), frame.iloc[:3], standardize=True, stats=stats)
        np.testing.assert_allclose(D2["mu"], D["mu"][:3])

    def test_missing_column(self, frame):
        with pytest.raises(DataError, match="missing"):
            design_matrices(self.cfg(), frame.drop(columns="b"))

    def test_non_finite(self, frame):
        frame.loc[4, "z"] = np.nan
        with pytest.raises(DataError, match="row 5"):
            frame_to_data(self.cfg(), frame)
        frame.loc[4, "z"] = 0.0
        frame.loc[2, "x"] = np.inf
        with pytest.raises(DataError, match="row 3"):
            frame_to_data(self.cfg(), frame)


class TestBuild:
    def test_model_and_scheme(self, frame):
        cfg = parse_config({"model": {"likelihood": "SGV", "k": 4, "Sigma_model": "npApproxGP",
                                      "knots": {"Sigma": {"grid": [2, 2]}}, "fixed": {"tau": 0.1}}})
        data, _ = frame_to_data(cfg, frame)
        model = build_model(cfg, data.coords)
        assert model.Sigma.knots.shape == (4, 2)
        lay = build_layout(model, data)
        assert "tau" not in lay.names
        scheme = build_scheme(cfg, lay, model)
        assert {t.split("[")[0] for s in scheme for t in s.targets} == set(lay.names)

    def test_explicit_scheme(self):
        cfg = parse_config({"mcmc": {"scheme": [{"kind": "slice", "targets": ["beta"]}]}})
        s = build_scheme(cfg, None, None)
        assert s[0].kind == "slice" and s[0].targets == ["beta"]

    def test_knots_file(self, tmp_path, frame):
        p = tmp_path / "k.csv"
        np.savetxt(p, [[0.1, 0.2], [0.5, 0.5], [0.9, 0.8]], delimiter=",")
        cfg = parse_config({"model": {"sigma_model": "approxGP", "knots": {"sigma": {"file": str(p)}}}})
        assert build_model(cfg, frame[["x", "y"]].to_numpy()).sigma.knots.shape == (3, 2)
