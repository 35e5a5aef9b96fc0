import numpy as np
import pytest

from nsgp.covariance import cov_matrix, cross_cov
from nsgp.errors import ConfigurationError
from nsgp.likelihood import LikelihoodEngine
from nsgp.predict import (
    PredictionRequest,
    PredictiveDraws,
    predict,
    predict_full,
    predict_nngp,
    predict_sgv,
    summarize,
)
from nsgp.processes import ModelSpec, SpatialData, assemble_kernel_field, build_layout

STATES = [
    {"beta": [0.3], "tau": 0.4, "sigma": 1.2, "Sigma_eig": [0.05, 0.02], "Sigma_angle": 0.5},
    {"beta": [-0.1], "tau": 0.2, "sigma": 0.8, "Sigma_eig": [0.1, 0.03], "Sigma_angle": 1.0},
]


def problem(N=30, M=5, seed=0, likelihood="fullGP", k=None, nu=1.5, fixed=None):
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(N, 2))
    z = rng.standard_normal(N)
    P = rng.uniform(size=(M, 2))
    model = ModelSpec(likelihood=likelihood, k=k or (N + M - 1), nu=nu, fixed=fixed or {})
    data = SpatialData(X, z)
    lay = build_layout(model, data)
    states = [lay.from_natural({n: v for n, v in s.items() if n in lay.slices}) for s in STATES]
    return model, data, P, states


class TestSummarize:
    def test_constant(self):
        m, s = summarize(np.full((5, 2), 3.0))
        np.testing.assert_allclose(m, 3.0)
        np.testing.assert_allclose(s, 0.0)

    def test_two_draws(self):
        m, s = summarize(np.array([[0.0], [2.0]]))
        assert m[0] == 1.0 and s[0] == pytest.approx(np.sqrt(2))

    def test_normal(self, rng):
        m, s = summarize(rng.standard_normal((10_000, 1)))
        assert abs(m[0]) < 0.05 and abs(s[0] - 1) < 0.05

    def test_properties_match(self, rng):
        D = rng.normal(size=(50, 3))
        pd_ = PredictiveDraws(D, "z", False)
        np.testing.assert_allclose(pd_.mean, D.mean(axis=0), atol=1e-12)
        np.testing.assert_allclose(pd_.sd, D.std(axis=0, ddof=1), atol=1e-12)

    def test_needs_two(self):
        with pytest.raises(ConfigurationError):
            summarize(np.zeros((1, 3)))


class TestFull:
    def test_noiseless_interpolation(self):
        model, data, _, states = problem(fixed={"tau": 0.0})
        r = predict_full(states, PredictionRequest(data.coords[:5], target="y"), data, model, every=1)
        np.testing.assert_allclose(r.cond_mean, np.broadcast_to(data.z[:5], r.cond_mean.shape), atol=1e-8)
        assert r.cond_var.max() <= 1e-8

    def test_prior_reversion(self):
        model, data, _, states = problem()
        r = predict_full(states, PredictionRequest([[500.0, 500.0]], target="y"), data, model, every=1)
        np.testing.assert_allclose(r.cond_mean[:, 0], [0.3, -0.1], atol=1e-10)
        np.testing.assert_allclose(r.cond_var[:, 0], [1.44, 0.64], atol=1e-10)

    def test_dense_oracle(self):
        model, data, P, states = problem(N=4, M=2)
        r = predict_full(states, PredictionRequest(P, target="y", joint=True), data, model, every=1)
        for l, th in enumerate(states):
            fo = assemble_kernel_field(model, th, data.coords)
            fp = assemble_kernel_field(model, th, P)
            C = cov_matrix(fo, model.matern, add_nugget=True)
            K = cross_cov(fp, fo, model.matern)
            mean = fp.mu + K @ np.linalg.solve(C, data.z - fo.mu)
            var = np.diag(cross_cov(fp, fp, model.matern) - K @ np.linalg.solve(C, K.T))
            np.testing.assert_allclose(r.cond_mean[l], mean, atol=1e-8)
            np.testing.assert_allclose(r.cond_var[l], var, atol=1e-8)

    def test_dense_cap(self):
        model, data, P, states = problem()
        with pytest.raises(ConfigurationError):
            predict_full(states, PredictionRequest(P), data, model, dense_cap=20)


class TestFullConditioningOracles:
    @pytest.mark.parametrize("target", ["y", "z"])
    @pytest.mark.parametrize("nu", [0.5, 1.5])
    def test_sgv_and_nngp_match_full(self, target, nu):
        res = {}
        for lik in ("fullGP", "SGV", "NNGP"):
            model, data, P, states = problem(likelihood=lik, nu=nu)
            res[lik] = predict(states, PredictionRequest(P, target=target), data, model, every=1)
        for lik in ("SGV", "NNGP"):
            np.testing.assert_allclose(res[lik].cond_mean, res["fullGP"].cond_mean, atol=1e-6)
            np.testing.assert_allclose(res[lik].cond_var, res["fullGP"].cond_var, atol=1e-6)


class TestContracts:
    @pytest.mark.parametrize("lik", ["fullGP", "SGV", "NNGP"])
    def test_nugget_monotonicity(self, lik):
        out = {}
        for t in "yz":
            model, data, P, states = problem(likelihood=lik, k=8)
            out[t] = predict(states, PredictionRequest(P, target=t), data, model, every=1)
        taus = np.array([[0.4], [0.2]])
        np.testing.assert_allclose(out["z"].cond_var - out["y"].cond_var, np.broadcast_to(taus ** 2, (2, 5)),
                                   atol=1e-12)

    # SGV orders prediction sites jointly, so equivariance is exact only with full conditioning
    @pytest.mark.parametrize("lik,k", [("fullGP", None), ("NNGP", 8), ("SGV", None)])
    def test_permutation_equivariance(self, lik, k):
        model, data, P, states = problem(likelihood=lik, k=k)
        perm = np.array([3, 0, 4, 1, 2])
        a = predict(states, PredictionRequest(P), data, model, every=1)
        b = predict(states, PredictionRequest(P[perm]), data, model, every=1)
        np.testing.assert_allclose(b.cond_mean, a.cond_mean[:, perm], atol=1e-10)
        np.testing.assert_allclose(b.cond_var, a.cond_var[:, perm], atol=1e-10)

    @pytest.mark.parametrize("lik", ["fullGP", "SGV", "NNGP"])
    def test_empty_and_reproducible(self, lik):
        model, data, P, states = problem(likelihood=lik, k=8)
        empty = predict(states, PredictionRequest(np.empty((0, 2))), data, model, every=1)
        assert empty.draws.shape == (2, 0)
        a = predict(states, PredictionRequest(P), data, model, seed=9, every=1)
        b = predict(states, PredictionRequest(P), data, model, seed=9, every=1)
        np.testing.assert_array_equal(a.draws, b.draws)

    def test_nngp_joint_rejected(self):
        model, data, P, states = problem(likelihood="NNGP", k=5)
        with pytest.raises(ConfigurationError, match="marginal"):
            predict_nngp(states, PredictionRequest(P, joint=True), data, model)

    def test_nngp_coincident_shrinkage(self):
        model, data, _, states = problem(likelihood="NNGP", k=1)
        r = predict_nngp(states[:1], PredictionRequest(data.coords[:1], target="y"), data, model, every=1)
        s2, t2 = 1.2 ** 2, 0.4 ** 2
        expected = 0.3 + s2 / (s2 + t2) * (data.z[0] - 0.3)
        assert r.cond_mean[0, 0] == pytest.approx(expected, abs=1e-12)

    def test_bad_target(self):
        with pytest.raises(ConfigurationError):
            PredictionRequest([[0.0, 0.0]], target="w")


class TestSGVDraws:
    def test_draws_match_moments(self):
        model, data, P, states = problem(likelihood="SGV", k=6, M=3)
        engine = LikelihoodEngine(model, data)
        r = predict_sgv([states[0]] * 3000, PredictionRequest(P, target="z"), data, model, seed=1, every=1,
                        engine=engine)
        m, v = r.cond_mean[0], r.cond_var[0]
        se = np.sqrt(v / 3000)
        assert np.all(np.abs(r.draws.mean(axis=0) - m) < 4 * se)
        np.testing.assert_allclose(r.draws.var(axis=0), v, rtol=0.1)

    def test_joint_covariance(self):
        # two coincident prediction sites must be nearly perfectly correlated for target y
        model, data, _, states = problem(likelihood="SGV", k=10)
        P = np.array([[0.5, 0.5], [0.5, 0.5 + 1e-4]])
        r = predict_sgv([states[0]] * 800, PredictionRequest(P, target="y"), data, model, seed=2, every=1)
        assert np.corrcoef(r.draws.T)[0, 1] > 0.99
