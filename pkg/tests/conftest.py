import numpy as np
import pytest

from ctxfed.data import FederatedDataset, SyntheticSpec, generate_synthetic
from ctxfed.model import LabeledDataset


def random_dataset(rng, m, d, c):
    x = rng.normal(size=(m, d))
    y = rng.integers(0, c, size=m)
    return LabeledDataset(x, y)


def central_diff(f, x, h=1e-5):
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_fed():
    return generate_synthetic(
        SyntheticSpec(alpha=1, beta=1, num_devices=12, num_features=6, num_classes=4,
                      samples_max=80, seed=7)
    )


@pytest.fixture
def twin_fed(rng):
    """Four devices holding exactly the same data."""
    base = random_dataset(rng, 30, 4, 3)
    return FederatedDataset((base,) * 4, base, 3)
