import numpy as np
import pytest

from actmark.data import SyntheticSpec, gen_synthetic


@pytest.fixture(scope="session")
def blobs():
    """Small, easy synthetic problem shared by the fast tests."""
    spec = SyntheticSpec(n_classes=4, dim=16, n_per_class=60, sigma=0.08, seed=7)
    return gen_synthetic(spec, "train"), gen_synthetic(spec, "test")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
