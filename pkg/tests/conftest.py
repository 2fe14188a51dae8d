import numpy as np
import pytest

from stensemble import kernels


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    """Run the test once per available kernel backend."""
    prev = kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def blobs(rng, sizes, F=2, sep=10.0, sigma=0.3):
    centers = rng.normal(size=(len(sizes), F)) * sep
    X = np.vstack([c + sigma * rng.normal(size=(n, F)) for c, n in zip(centers, sizes)])
    y = np.repeat(np.arange(len(sizes)), sizes)
    return X, y
