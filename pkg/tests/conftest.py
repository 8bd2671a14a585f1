"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from pcad import ShapeSpec, make_shape
from pcad.geometry import estimate_normals_curvature


@pytest.fixture(scope="session")
def washer_cloud():
    """A mid-size washer sample reused by read-only tests."""
    return make_shape(ShapeSpec("washer", n_points=1200, noise_sigma=0.02, seed=31))


@pytest.fixture(scope="session")
def washer_analyzed(washer_cloud):
    """The washer with normals and curvature attached."""
    return estimate_normals_curvature(washer_cloud, k=12)


def random_cloud_points(rng, n):
    """Generic noise-free random coordinates for geometry-free tests."""
    return rng.uniform(-10.0, 10.0, (n, 3))
