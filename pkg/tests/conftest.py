import numpy as np
import pytest

from midpoint.factorization import ExtendedItemProfile


def make_profiles(rng, n, d, bias_scale=1.0, prefix=""):
    return [
        ExtendedItemProfile(f"{prefix}{j}", float(rng.uniform(-bias_scale, bias_scale)), rng.standard_normal(d))
        for j in range(n)
    ]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
