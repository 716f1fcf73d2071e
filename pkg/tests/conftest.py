import numpy as np
import pytest

from norlab.kernels import BACKENDS
from norlab.model import ModelParams


def random_params(rng, D, K, zero_frac=0.3, leak=(0.01, 0.5), mu=(0.05, 0.6), scale=1.0):
    theta = rng.gamma(0.7, scale, size=(D, K))
    theta[rng.random((D, K)) < zero_frac] = 0.0
    theta0 = rng.uniform(*leak, size=D)
    return ModelParams(theta, theta0, rng.uniform(*mu, size=K))


def random_x(rng, D, p=0.4, min_pos=1):
    x = (rng.random(D) < p).astype(np.uint8)
    if x.sum() < min_pos:
        x[rng.choice(D, size=min_pos, replace=False)] = 1
    return x


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
