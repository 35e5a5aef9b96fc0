import numpy as np
import pytest
from scipy import stats

from nsgp.errors import ConfigurationError, NumericalError
from nsgp.likelihood import loglik_full
from nsgp.mcmc import (
    PosteriorSamples,
    SamplerSpec,
    build_samplers,
    default_scheme,
    effective_sample_size,
    efficiency_report,
    knot_groups,
    log_posterior,
    run_chain,
)
from nsgp.params import Identity, ParamInfo, ParamLayout, Prior
from nsgp.processes import ModelSpec, ProcessModelSpec, SpatialData, build_layout
from nsgp.simulate import grid_knots

from conftest import STATIONARY_TRUTH

ONE = ParamLayout([ParamInfo("x", 1, Identity(), Prior("flat"))])


def drive(kind, logpdf, n=50_000, burn=5_000, scale=1.0, seed=1, x0=0.0, freeze_at=None):
    s = build_samplers([SamplerSpec(kind, ["x"], scale=scale)], ONE)[0]

    def post(th):
        return logpdf(th.u[0])

    rng = np.random.default_rng(seed)
    th = ONE.state([x0])
    lp = post(th)
    out = np.empty(n)
    stop = burn if freeze_at is None else freeze_at
    for it in range(burn + n):
        if it == stop:
            s.freeze()
        th, lp = s.step(th, lp, post, rng)
        s.end_iteration(th)
        if it >= burn:
            out[it - burn] = th.u[0]
    return out, s


def std_normal(x):
    return -0.5 * x * x


def unit_uniform(x):
    return 0.0 if 0.0 <= x <= 1.0 else -np.inf


class TestSamplersOnKnownTargets:
    @pytest.mark.parametrize("kind", ["rw", "block_rw", "slice"])
    def test_normal_moments(self, kind):
        x, _ = drive(kind, std_normal, scale=5.0, x0=3.0)
        assert abs(x.mean()) < 0.05
        assert abs(x.var() - 1.0) < 0.1

    @pytest.mark.parametrize("kind", ["rw", "block_rw", "slice"])
    @pytest.mark.parametrize("target,cdf", [(std_normal, stats.norm.cdf), (unit_uniform, stats.uniform.cdf)])
    def test_invariance_ks(self, kind, target, cdf):
        x, _ = drive(kind, target, x0=0.5, seed=11)
        assert stats.kstest(x[::25], cdf).pvalue > 0.001

    def test_tiny_scale_accepts(self):
        _, s = drive("rw", std_normal, n=2000, burn=0, scale=1e-8, freeze_at=0)
        assert s.acceptance() > 0.99

    def test_slice_uniform_support(self):
        x, s = drive("slice", unit_uniform, n=5000, burn=0, x0=0.5)
        assert s.acceptance() == 1.0
        assert np.all((x >= 0) & (x <= 1))

    @pytest.mark.parametrize("kind", ["rw", "block_rw", "slice"])
    def test_reproducible(self, kind):
        a, _ = drive(kind, std_normal, n=500, burn=100, seed=5)
        b, _ = drive(kind, std_normal, n=500, burn=100, seed=5)
        np.testing.assert_array_equal(a, b)

    def test_detailed_balance_three_states(self):
        # piecewise-constant target on three cells; Metropolis flows i->j and j->i must balance
        w = np.log([0.2, 0.3, 0.5])

        def target(x):
            return w[int(x)] if 0.0 <= x < 3.0 else -np.inf

        x, _ = drive("rw", target, n=200_000, burn=0, scale=1.5, x0=0.5, freeze_at=0)
        cells = x.astype(int)
        freq = np.bincount(cells, minlength=3) / cells.size
        np.testing.assert_allclose(freq, [0.2, 0.3, 0.5], atol=0.02)
        flow = np.zeros((3, 3))
        np.add.at(flow, (cells[:-1], cells[1:]), 1)
        off = flow - flow.T
        assert np.max(np.abs(off)) <= 4 * np.sqrt(flow.max())

    def test_slice_shrink_failure(self):
        s = build_samplers([SamplerSpec("slice", ["x"])], ONE)[0]
        with pytest.raises(NumericalError):
            s.step(ONE.state([0.0]), 0.0, lambda th: -np.inf, np.random.default_rng(0))

    def test_adaptation_reaches_target(self):
        _, s = drive("rw", std_normal, n=20_000, burn=20_000, scale=20.0)
        assert abs(s.acceptance() - 0.44) < 0.07


class TestESS:
    def test_iid(self, rng):
        ess, const = effective_sample_size(rng.normal(size=5000))
        assert not const
        assert abs(ess / 5000 - 1) < 0.15

    def test_ar1(self, rng):
        n, rho = 20_000, 0.9
        e = rng.normal(size=n)
        x = np.empty(n)
        x[0] = e[0] / np.sqrt(1 - rho ** 2)
        for t in range(1, n):
            x[t] = rho * x[t - 1] + e[t]
        ess, _ = effective_sample_size(x)
        expected = (1 - rho) / (1 + rho)
        assert abs(ess / n / expected - 1) < 0.25

    def test_constant(self):
        assert effective_sample_size(np.full(100, 3.0)) == (0.0, True)

    def test_too_short(self):
        with pytest.raises(ConfigurationError):
            effective_sample_size(np.arange(5.0))


class TestLogPosterior:
    def _setup(self, priors=None, n=3):
        rng = np.random.default_rng(2)
        X = rng.uniform(size=(n, 2))
        data = SpatialData(X, rng.normal(size=n))
        model = ModelSpec(priors=priors or {})
        return model, data, build_layout(model, data)

    def test_outside_uniform(self):
        model, data, lay = self._setup()
        th = lay.from_natural({**STATIONARY_TRUTH, "tau": 150.0})
        assert log_posterior(th, model, data) == -np.inf

    def test_flat_priors_equal_loglik_plus_jacobian(self):
        flat = {n: "flat" for n in ("beta", "tau", "sigma", "Sigma_eig", "Sigma_angle")}
        model, data, lay = self._setup(flat)
        th = lay.from_natural(STATIONARY_TRUTH)
        from nsgp.processes import assemble_kernel_field

        ll = loglik_full(data.z, assemble_kernel_field(model, th, data.coords), model.matern)
        jac = sum(lay.info[n].transform.log_jacobian(th.block(n)) for n in lay.names)
        assert log_posterior(th, model, data) == pytest.approx(ll + jac, abs=1e-10)

    def test_hand_summed(self):
        model, data, lay = self._setup()
        th = lay.from_natural(STATIONARY_TRUTH)
        from nsgp.processes import assemble_kernel_field

        ll = loglik_full(data.z, assemble_kernel_field(model, th, data.coords), model.matern)
        terms = [
            stats.norm.logpdf(0.5, 0, 100),
            -np.log(100) + np.log(0.3),
            -np.log(100) + np.log(1.0),
            np.sum(stats.lognorm.logpdf([0.04, 0.01], s=10, scale=1.0)) + np.log(0.04) + np.log(0.01),
            -np.log(np.pi / 2) + np.log(0.6) + np.log(1 - 0.6 / (np.pi / 2)),
        ]
        assert log_posterior(th, model, data) == pytest.approx(ll + sum(terms), abs=1e-10)


class TestRunChain:
    def _model_data(self, n=40):
        from nsgp.simulate import simulate

        model = ModelSpec(likelihood="NNGP", k=8)
        sim = simulate(model, STATIONARY_TRUTH, n=n, seed=3)
        return model, sim.data

    def test_empty_when_all_burnin(self):
        model, data = self._model_data()
        s = run_chain(model, data, iterations=50, burnin=50, progress=lambda _: None)
        assert s.n == 0 and s.natural().shape == (0, len(s.names))

    def test_retained_count_and_reproducible(self):
        model, data = self._model_data()
        a = run_chain(model, data, iterations=230, burnin=30, thin=7, seed=4, progress=lambda _: None)
        b = run_chain(model, data, iterations=230, burnin=30, thin=7, seed=4, progress=lambda _: None)
        assert a.n == (230 - 30) // 7
        np.testing.assert_array_equal(a.u, b.u)

    def test_bad_initial_prior_named(self):
        model, data = self._model_data()
        with pytest.raises(ConfigurationError, match="tau"):
            run_chain(model, data, iterations=10, burnin=0, init={"tau": 500.0}, progress=lambda _: None)

    def test_draws_inside_support_and_progress(self):
        model, data = self._model_data()
        lines = []
        s = run_chain(model, data, iterations=1000, burnin=200, seed=1, progress=lines.append)
        assert len(lines) == 1 and lines[0].startswith("iter 1000/1000")
        for l in range(s.n):
            assert np.isfinite(s.layout.log_prior(s.state(l))[0])
        ang = s.column("Sigma_angle")
        assert np.all((ang > 0) & (ang < np.pi / 2))

    def test_round_trip_natural(self):
        model, data = self._model_data()
        s = run_chain(model, data, iterations=60, burnin=10, progress=lambda _: None)
        back = PosteriorSamples.from_natural(s.layout, s.natural())
        np.testing.assert_allclose(back.u, s.u, atol=1e-10)

    def test_efficiency_report(self):
        model, data = self._model_data()
        s = run_chain(model, data, iterations=300, burnin=100, progress=lambda _: None)
        rows, min_eff = efficiency_report(s)
        assert [r.name for r in rows] == s.names
        assert min_eff == min(r.ess_per_sec for r in rows if not r.constant)
        rows2, _ = efficiency_report([s, s])
        assert rows2[0].ess == pytest.approx(2 * rows[0].ess)

    def test_bad_lengths(self):
        model, data = self._model_data()
        with pytest.raises(ConfigurationError):
            run_chain(model, data, iterations=10, burnin=20)


class TestSchemes:
    def test_coverage_checked(self):
        lay = build_layout(ModelSpec(), SpatialData(np.random.default_rng(0).uniform(size=(5, 2)), np.zeros(5)))
        with pytest.raises(ConfigurationError, match="not covered"):
            build_samplers([SamplerSpec("rw", ["beta"])], lay)
        with pytest.raises(ConfigurationError, match="more than one"):
            build_samplers([SamplerSpec("rw", ["beta", "tau", "sigma", "Sigma_eig", "Sigma_angle"]),
                            SamplerSpec("rw", ["tau"])], lay)

    def test_knot_groups_partition(self, rng):
        knots = rng.uniform(size=(64, 2))
        groups = knot_groups(knots, 8, seed=0)
        assert sorted(np.concatenate(groups).tolist()) == list(range(64))
        assert 4 <= len(groups) <= 8

    @pytest.mark.parametrize("joint", [False, True])
    @pytest.mark.parametrize("hyper", ["rw", "slice"])
    @pytest.mark.parametrize("block_size", [4, 8, 16, 32])
    def test_np_approx_family(self, joint, hyper, block_size, rng):
        X = rng.uniform(size=(50, 2))
        model = ModelSpec(Sigma=ProcessModelSpec("Sigma", "npApproxGP", grid_knots(X, (8, 8))))
        lay = build_layout(model, SpatialData(X, np.zeros(50)))
        scheme = default_scheme(lay, model, block_size=block_size, joint=joint, hyper=hyper)
        build_samplers(scheme, lay)
        kinds = {s.kind for s in scheme if any("_gp_" in t for t in s.targets)}
        assert kinds == {hyper}
        if joint:
            assert any(len(s.targets) == 3 for s in scheme)

    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            SamplerSpec("hmc", ["x"])
