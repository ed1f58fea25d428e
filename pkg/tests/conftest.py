import numpy as np
import pytest

from ivcond.iv_core import IVData
from ivcond.sampler import SamplerConfig
from ivcond.sim_harness import SimConfig, generate
from ivcond.sisvive import RandomizationSpec, TuningParams, solve_randomized_sisvive

MASTER_SEED = 0


@pytest.fixture(scope="session")
def bench():
    """One benchmark-design dataset with its selection certificate."""
    cfg = SimConfig()
    data, params = generate(cfg, 12345)
    tuning = TuningParams.default(data.grams)
    sel = solve_randomized_sisvive(data.grams, tuning, RandomizationSpec(seed=7))
    return {"cfg": cfg, "data": data, "params": params, "sel": sel}


@pytest.fixture(scope="session")
def small_iv():
    """Fixed 6-observation, 2-instrument dataset used by the frozen oracles."""
    y = np.array([1.0, 2.0, 0.5, -1.0, -2.5, 0.7])
    d = np.array([0.5, 1.5, 1.0, -0.5, -1.8, 0.1])
    z = np.array([[1.0, 0.3], [2.0, -1.0], [0.0, 2.0],
                  [-1.0, 0.8], [-2.0, -1.5], [0.5, -0.2]])
    return IVData(y, d, z)


@pytest.fixture(scope="session")
def tiny_iv():
    """Fixed 5-observation single-instrument dataset."""
    y = np.array([1.2, -0.3, 0.5, -1.0, 0.1])
    d = np.array([0.8, 0.2, -0.4, -0.9, 0.4])
    z = np.array([1.0, 0.5, -0.3, -1.2, 0.2]).reshape(-1, 1)
    return IVData(y, d, z)


@pytest.fixture()
def fast_cfg():
    return SamplerConfig(burnin=1000, samples=3000, seed=42)


def random_instance(rng, n=60, L=4, n_invalid=1, beta=1.0, alpha=4.0,
                    gamma=1.0, rho=0.5):
    """Small random dataset for property-style checks."""
    a = np.zeros(L)
    a[:n_invalid] = alpha
    g = np.full(L, gamma)
    z = rng.standard_normal((n, L))
    chol = np.linalg.cholesky(np.array([[1.0, rho], [rho, 1.0]]))
    errs = rng.standard_normal((n, 2)) @ chol.T
    d = z @ g + errs[:, 1]
    y = z @ a + d * beta + errs[:, 0]
    return IVData(y, d, z)
