import numpy as np
import pytest
from scipy.stats import multivariate_normal, norm

from nsgp import _backend
from nsgp.covariance import KernelField, MaternSpec, cov_matrix
from nsgp.errors import ConfigurationError, NumericalError
from nsgp.likelihood import (
    LikelihoodEngine,
    _local,
    build_u_sgv,
    dense_joint_precision,
    factorize_sgv,
    loglik_full,
    loglik_nngp,
    loglik_sgv,
    vecchia_local_regression,
)
from nsgp.neighbors import determine_neighbors, order_maxmin, sgv_setup
from nsgp.processes import ModelSpec, SpatialData, build_layout
from nsgp.sparse import LatentPrecisionPlan

from conftest import STATIONARY_TRUTH, random_field


def ordered_problem(n, k, seed=0, nu=1.5, strategy="sgv"):
    f = random_field(n, seed=seed)
    z = f.mu + np.random.default_rng(seed + 1).normal(size=n)
    o = order_maxmin(f.coords)
    fo = f.take(o.perm)
    g = determine_neighbors(o, k)
    return f, z, fo, z[o.perm], g, sgv_setup(g, strategy), MaternSpec(nu)


class TestFull:
    def test_single_site(self):
        f = KernelField(np.zeros((1, 2)), 0.4, 1.0, 1.0, np.eye(2))
        assert loglik_full([0.4], f, MaternSpec(0.5)) == pytest.approx(np.log(1 / np.sqrt(2 * np.pi * 2)))

    def test_dense_oracle(self):
        f = random_field(3, seed=2)
        spec = MaternSpec(0.5)
        z = np.array([0.1, -0.3, 0.8])
        C = cov_matrix(f, spec, add_nugget=True)
        assert loglik_full(z, f, spec) == pytest.approx(multivariate_normal(f.mu, C).logpdf(z), abs=1e-10)

    def test_permutation_invariant(self, rng):
        f = random_field(25, seed=3)
        z = rng.normal(size=25)
        p = rng.permutation(25)
        spec = MaternSpec(1.5)
        assert loglik_full(z[p], f.take(p), spec) == pytest.approx(loglik_full(z, f, spec), abs=1e-10)

    def test_dense_cap(self):
        f = random_field(20)
        with pytest.raises(ConfigurationError):
            loglik_full(np.zeros(20), f, MaternSpec(0.5), dense_cap=10)


class TestLocalRegression:
    def test_empty(self):
        C = np.array([[2.0]])
        b, d = vecchia_local_regression(0, [], C)
        assert b.size == 0 and d == 2.0

    def test_bivariate(self):
        r = 0.6
        C = np.array([[1, r], [r, 1]])
        b, d = vecchia_local_regression(1, [0], C)
        assert b[0] == pytest.approx(r) and d == pytest.approx(1 - r * r)

    def test_schur_complement(self, rng):
        A = rng.normal(size=(4, 4))
        C = A @ A.T + 4 * np.eye(4)
        b, d = vecchia_local_regression(3, [0, 1, 2], C)
        np.testing.assert_allclose(b, np.linalg.solve(C[:3, :3], C[:3, 3]), atol=1e-10)
        assert d == pytest.approx(C[3, 3] - C[3, :3] @ np.linalg.solve(C[:3, :3], C[:3, 3]), abs=1e-10)

    def test_degenerate(self):
        C = np.ones((2, 2))
        with pytest.raises(NumericalError):
            vecchia_local_regression(1, [0], C)

    def test_batched_matches_single(self):
        _, _, fo, _, g, cs, spec = ordered_problem(40, 5)
        B, dvar = _local(fo, spec, g.nbr, cs.latent, "test")
        Cy = cov_matrix(fo, spec)
        for i in (7, 23, 39):
            nb, lat = g[i], cs.latent[i, : g[i].size] == 1
            C = Cy[np.ix_(nb, nb)] + np.diag(np.where(lat, 0.0, fo.tau[nb] ** 2))
            b = np.linalg.solve(C, Cy[nb, i])
            np.testing.assert_allclose(B[i, : nb.size], b, atol=1e-10)
            assert dvar[i] == pytest.approx(Cy[i, i] - Cy[i, nb] @ b, abs=1e-10)


class TestNNGP:
    def test_independence(self, rng):
        f = random_field(15, seed=4)
        z = rng.normal(size=15)
        g = determine_neighbors(order_maxmin(f.coords), 0)
        ind = np.sum(norm.logpdf(z, f.mu, np.sqrt(f.sigma ** 2 + f.tau ** 2)))
        assert loglik_nngp(z, f, MaternSpec(0.5), g) == pytest.approx(ind, rel=1e-12)

    @pytest.mark.parametrize("nu", [0.5, 1.5, 2.0])
    def test_full_conditioning_exact(self, nu):
        f, z, fo, zo, g, _, _ = ordered_problem(50, 49, nu=nu)
        spec = MaternSpec(nu)
        full = loglik_full(z, f, spec)
        assert loglik_nngp(zo, fo, spec, g) == pytest.approx(full, rel=1e-8)

    def test_deterministic(self):
        _, _, fo, zo, g, _, spec = ordered_problem(60, 8)
        assert loglik_nngp(zo, fo, spec, g) == loglik_nngp(zo, fo, spec, g)


class TestSGV:
    @pytest.mark.parametrize("strategy", ["sgv", "latent", "sgv_subset"])
    def test_full_conditioning_exact(self, strategy):
        f, z, fo, zo, g, cs, spec = ordered_problem(50, 49, strategy=strategy)
        assert loglik_sgv(zo, fo, spec, cs) == pytest.approx(loglik_full(z, f, spec), rel=1e-8)

    def test_single_site(self):
        f = KernelField(np.zeros((1, 2)), 0.2, 0.5, 1.3, np.eye(2))
        g = determine_neighbors(order_maxmin(f.coords), 3)
        cs = sgv_setup(g)
        exact = norm.logpdf(1.0, 0.2, np.sqrt(1.3 ** 2 + 0.25))
        assert loglik_sgv([1.0], f, MaternSpec(0.5), cs) == pytest.approx(exact, rel=1e-12)

    def test_evaluation_point_free(self, rng):
        _, _, fo, zo, g, cs, spec = ordered_problem(80, 6)
        base = loglik_sgv(zo, fo, spec, cs)
        for _ in range(3):
            y = rng.normal(size=80)
            assert loglik_sgv(zo, fo, spec, cs, y_star=y) == pytest.approx(base, rel=1e-8)

    def test_observed_strategy_equals_nngp(self):
        _, _, fo, zo, g, _, spec = ordered_problem(70, 6)
        cs = sgv_setup(g, "observed")
        assert loglik_sgv(zo, fo, spec, cs) == pytest.approx(loglik_nngp(zo, fo, spec, g), rel=1e-10)

    def test_posterior_mean_oracle(self):
        _, _, fo, zo, g, cs, spec = ordered_problem(30, 29)
        fac = factorize_sgv(fo, spec, cs)
        r = zo - fo.mu
        Cy = cov_matrix(fo, spec)
        exact = Cy @ np.linalg.solve(Cy + np.diag(fo.tau ** 2), r)
        np.testing.assert_allclose(fac.posterior_mean(r), exact, atol=1e-8)

    def test_zero_nugget_rejected(self):
        f = KernelField(np.random.default_rng(0).uniform(size=(5, 2)), 0, 0.0, 1.0, np.eye(2) * 0.1)
        cs = sgv_setup(determine_neighbors(order_maxmin(f.coords), 2))
        with pytest.raises(NumericalError):
            loglik_sgv(np.zeros(5), f, MaternSpec(0.5), cs)


class TestSparseFactor:
    def test_single_site_hand(self):
        f = KernelField(np.zeros((1, 2)), 0, 0.5, 2.0, np.eye(2))
        cs = sgv_setup(determine_neighbors(order_maxmin(f.coords), 1))
        U = build_u_sgv(f, MaternSpec(0.5), cs).U.toarray()
        np.testing.assert_allclose(U, [[0.5, -2.0], [0.0, 2.0]])

    def test_precision_oracle(self):
        _, _, fo, _, g, cs, spec = ordered_problem(20, 19)
        P = build_u_sgv(fo, spec, cs).precision()
        D = dense_joint_precision(fo, spec)
        assert np.linalg.norm(P - D) / np.linalg.norm(D) < 1e-8

    def test_column_counts(self):
        _, _, fo, _, g, cs, spec = ordered_problem(200, 10)
        fac = build_u_sgv(fo, spec, cs)
        assert fac.column_nnz().max() <= 11
        assert np.all(fac.U.diagonal() > 0)

    def test_cholesky_matches_dense(self):
        _, _, fo, _, g, cs, spec = ordered_problem(60, 6)
        fac = factorize_sgv(fo, spec, cs)
        plan = fac.plan
        A = plan.dense_lower(fac.Ax)
        L = np.zeros_like(A)
        for j in range(plan.n):
            rows = plan.Li[plan.Lp[j]:plan.Lp[j + 1]]
            L[rows, j] = fac.Lx[plan.Lp[j]:plan.Lp[j + 1]]
        np.testing.assert_allclose(L @ L.T, A, atol=1e-10)


class TestEngine:
    @pytest.mark.parametrize("kind", ["fullGP", "NNGP", "SGV"])
    def test_caches_mean_moves(self, kind, small_data):
        _, sim = small_data
        model = ModelSpec(likelihood=kind, k=8)
        eng = LikelihoodEngine(model, sim.data)
        lay = build_layout(model, sim.data)
        th = lay.from_natural(STATIONARY_TRUTH)
        a = eng.loglik(th)
        th2 = lay.from_natural({**STATIONARY_TRUTH, "beta": [0.9]})
        eng.loglik(th2)
        assert eng.n_factorizations == 1
        assert eng.loglik(th) == a

    def test_order_irrelevant_for_full(self, small_data):
        model, sim = small_data
        lay = build_layout(model, sim.data)
        th = lay.from_natural(STATIONARY_TRUTH)
        exact = loglik_full(sim.data.z, sim.field, model.matern)
        assert LikelihoodEngine(model, sim.data).loglik(th) == pytest.approx(exact, rel=1e-12)


@pytest.mark.skipif("compiled" not in _backend.available(), reason="extension not built")
class TestBackendAgreement:
    def _both(self, fn):
        out = {}
        for name in ("compiled", "python"):
            prev = _backend.use(name)
            try:
                out[name] = fn()
            finally:
                _backend.use(prev)
        return out["compiled"], out["python"]

    @pytest.mark.parametrize("strategy", ["sgv", "observed", "latent"])
    def test_sgv_loglik(self, strategy):
        _, _, fo, zo, g, cs, spec = ordered_problem(120, 8, strategy=strategy)
        a, b = self._both(lambda: loglik_sgv(zo, fo, spec, cs))
        assert a == pytest.approx(b, rel=1e-12)

    def test_nngp_loglik(self):
        _, _, fo, zo, g, _, spec = ordered_problem(120, 8, nu=2.2)
        a, b = self._both(lambda: loglik_nngp(zo, fo, spec, g))
        assert a == pytest.approx(b, rel=1e-12)

    def test_sparse_solves(self, rng):
        _, _, fo, zo, g, cs, spec = ordered_problem(50, 5)
        fac = factorize_sgv(fo, spec, cs)
        rhs = rng.normal(size=50)
        a, b = self._both(lambda: (fac.plan.lsolve(fac.Lx, rhs), fac.plan.ltsolve(fac.Lx, rhs)))
        np.testing.assert_allclose(a[0], b[0], rtol=1e-12)
        np.testing.assert_allclose(a[1], b[1], rtol=1e-12)
