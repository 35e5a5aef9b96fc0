import numpy as np
import pytest
from scipy.spatial.distance import pdist

from nsgp.errors import ConfigurationError
from nsgp.processes import ModelSpec
from nsgp.simulate import grid_knots, simulate, uniform_coords
from conftest import STATIONARY_TRUTH


class TestHelpers:
    def test_uniform_box(self, rng):
        X = uniform_coords(500, ((2, 3), (-1, 0)), rng)
        assert X.shape == (500, 2) and X[:, 0].min() >= 2 and X[:, 1].max() <= 0

    def test_grid_knots(self):
        X = np.array([[0.0, 0.0], [2.0, 1.0]])
        K = grid_knots(X, [3, 2])
        assert K.shape == (6, 2)
        np.testing.assert_allclose(np.unique(K[:, 0]), [0, 1, 2])
        with pytest.raises(ConfigurationError):
            grid_knots(X, [3])


class TestSimulate:
    def test_zero_nugget(self):
        m = ModelSpec(likelihood="fullGP", fixed={"tau": 0.0})
        truth = {k: v for k, v in STATIONARY_TRUTH.items() if k != "tau"}
        s = simulate(m, truth, n=50, seed=1)
        np.testing.assert_array_equal(s.data.z, s.y)

    def test_reproducible(self):
        m = ModelSpec(likelihood="fullGP")
        a = simulate(m, STATIONARY_TRUTH, n=40, seed=3)
        b = simulate(m, STATIONARY_TRUTH, n=40, seed=3)
        assert a.data.z.tobytes() == b.data.z.tobytes()
        assert a.data.coords.tobytes() == b.data.coords.tobytes()

    def test_missing_truth(self):
        with pytest.raises(ConfigurationError, match="missing"):
            simulate(ModelSpec(), {"beta": [0.0]}, n=10)

    def test_dense_cap(self):
        with pytest.raises(ConfigurationError, match="cap"):
            simulate(ModelSpec(), STATIONARY_TRUTH, n=30, dense_cap=20)

    def test_variogram(self):
        # exponential correlation exp(-h / 0.05) with nugget 0.09
        m = ModelSpec(likelihood="fullGP", nu=0.5)
        truth = {"beta": [0.0], "tau": 0.3, "sigma": 1.0, "Sigma_eig": [0.0025, 0.0025], "Sigma_angle": 0.3}
        s = simulate(m, truth, n=2000, seed=0)
        d = pdist(s.data.coords)
        g = 0.5 * pdist(s.data.z[:, None], "sqeuclidean")
        for lo, hi in [(0.02, 0.04), (0.04, 0.06), (0.08, 0.1)]:
            sel = (d >= lo) & (d < hi)
            theory = 0.09 + 1 - np.exp(-d[sel].mean() / 0.05)
            assert g[sel].mean() == pytest.approx(theory, rel=0.15)
