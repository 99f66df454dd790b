"""Shared fixtures: seeded rngs and small on-disk synthetic datasets."""

import numpy as np
import pytest

from ruas.io_metrics import make_synthetic_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Six paired 32x32 images; shared across tests that only read them."""
    root = tmp_path_factory.mktemp("tiny_data")
    records = make_synthetic_dataset(root, 6, size=32, seed=5, noise_sigma=0.03)
    return root, records
