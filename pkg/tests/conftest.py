import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_enforced_pairs(rng, n_pairs, n_cols):
    """Random valid (a <= b) integer pairs."""
    a = rng.integers(0, n_cols + 1, size=n_pairs)
    b = rng.integers(0, n_cols + 1, size=n_pairs)
    lo = np.minimum(a, b)
    hi = np.maximum(a, b)
    return lo, hi
