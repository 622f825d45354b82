import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_homography(rng, strength=0.05):
    """A well-conditioned projective map of the unit square onto itself, roughly."""
    m = np.eye(3) + strength * rng.standard_normal((3, 3))
    m[2, :2] *= 0.5
    m[2, 2] = 1.0
    return m
