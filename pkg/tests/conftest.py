import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from otsi.core import AlignmentProblem, PointCloud

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def problem_for(n, m, lam=100.0, iters=200, d=1, rng=None, weights=False):
    """Problem whose points are irrelevant (the cost is passed explicitly)."""
    rng = rng or np.random.default_rng(0)
    a = b = None
    if weights:
        a = rng.uniform(0.5, 1.5, n)
        b = rng.uniform(0.5, 1.5, m)
        a, b = a / a.sum(), b / b.sum()
    return AlignmentProblem(PointCloud(rng.standard_normal((n, d)), a),
                            PointCloud(rng.standard_normal((m, d)), b), lam, iters)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
