import numpy as np
import pytest

from frailtymix import default_dgp, simulate_dataset


@pytest.fixture(scope="session")
def bench_data():
    """One benchmark-DGP dataset shared across the suite."""
    dataset, truth, frailties = simulate_dataset(default_dgp(), 1)
    return dataset, truth, frailties


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
