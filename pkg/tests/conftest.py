import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def factor_panel(rng, N, T, r=2, noise=1.0, loading_mean=0.0):
    """Demeaned-ready panel with r Gaussian factors; returns (Y, F, L)."""
    F = rng.standard_normal((T, r))
    L = loading_mean + rng.standard_normal((N, r))
    Y = F @ L.T + noise * rng.standard_normal((T, N))
    return Y, F, L
