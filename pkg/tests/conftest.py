import numpy as np
import pytest

from geoflow.density import GaussianMixture
from geoflow.nets import CorrectorNet, VelocityNet


def randomize(net, rng, scale=0.5):
    """Give a freshly created net non-zero output weights."""
    net.params = net.params + scale * rng.standard_normal(net.params.shape)
    return net


def random_corrector(d=2, hidden=(8, 8), seed=0, activation="silu"):
    rng = np.random.default_rng(seed + 1000)
    return randomize(CorrectorNet.create(d, hidden, activation, seed=seed), rng)


def random_velocity(d=2, cond_dim=0, hidden=(8,), seed=0):
    rng = np.random.default_rng(seed + 2000)
    return randomize(VelocityNet.create(d, cond_dim, hidden, seed=seed), rng)


def random_gmm(rng, k=3, d=2, spread=2.0):
    w = rng.uniform(0.5, 1.5, k)
    return GaussianMixture(
        w / w.sum(), rng.normal(0, spread, (k, d)), rng.uniform(0.3, 1.5, (k, d))
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
