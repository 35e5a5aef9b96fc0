import numpy as np
import pytest

from nsgp.covariance import KernelField, MaternSpec
from nsgp.processes import ModelSpec, SpatialData, build_layout


def random_field(n, seed=0, d=2, nonstationary=True, tau=0.3):
    """Field with smoothly varying sigma, tau and anisotropy on the unit box."""
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    if nonstationary:
        sigma = 0.8 + 0.4 * X[:, 0]
        tau = tau * (0.7 + 0.6 * X[:, -1])
        A = rng.normal(scale=0.3, size=(n, d, d))
        Sigma = 0.02 * np.eye(d) + 0.01 * A @ np.swapaxes(A, 1, 2)
    else:
        sigma = np.ones(n)
        tau = np.full(n, tau)
        Sigma = np.broadcast_to(np.diag([0.05, 0.02][:d] + [0.03] * max(d - 2, 0)), (n, d, d))
    mu = 0.5 + 0.2 * X[:, 0]
    return KernelField(X, mu, tau, sigma, Sigma)


def stationary_model(likelihood="fullGP", k=15, nu=0.5, **kw):
    return ModelSpec(likelihood=likelihood, k=k, nu=nu, **kw)


STATIONARY_TRUTH = {"beta": [0.5], "tau": 0.3, "sigma": 1.0, "Sigma_eig": [0.04, 0.01], "Sigma_angle": 0.6}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_data():
    from nsgp.simulate import simulate

    model = stationary_model()
    sim = simulate(model, STATIONARY_TRUTH, n=60, seed=7)
    return model, sim


@pytest.fixture
def matern15():
    return MaternSpec(1.5)


@pytest.fixture
def layout_for():
    def make(model, n=10, seed=0, d=2):
        X = np.random.default_rng(seed).uniform(size=(n, d))
        return build_layout(model, SpatialData(X, np.zeros(n)))
    return make
