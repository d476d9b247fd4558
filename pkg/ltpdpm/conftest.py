"""Shared fixtures."""

import pytest

from ltpdpm.model import make_synthetic_truth


@pytest.fixture(scope="session")
def small_truth():
    """A 5 x 4 grid, three components, two fitted and two projected years."""
    return make_synthetic_truth(n_lon=5, n_lat=4, n_years=2, n_future_years=2, n_eofs=3, seed=11)
