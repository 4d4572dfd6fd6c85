from __future__ import annotations

import numpy as np
import pytest

from boundedcp.bar_model import BarParams, BoundedSeries, rho_lower_bound, simulate_bar


def random_params(rng: np.random.Generator, margin: float = 0.02) -> BarParams:
    """Uniform draw from the admissible region, kept ``margin`` from its edges."""
    p = rng.uniform(0.05, 0.95)
    rho = rng.uniform(rho_lower_bound(p) + margin, 1.0 - margin)
    return BarParams(p, rho)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def short_series(rng) -> BoundedSeries:
    return simulate_bar(BarParams(0.3, 0.1), 10, 200, rng)


@pytest.fixture(scope="session")
def long_series() -> BoundedSeries:
    return simulate_bar(BarParams(0.5, 0.4), 10, 10_000, np.random.default_rng(4))
