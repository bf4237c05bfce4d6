import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from icp_reasoner.geometry import PointCloud, RigidTransform, rotation_about_axis

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_rotation(rng, max_deg=180.0):
    axis = rng.normal(size=3)
    return rotation_about_axis(axis, np.radians(rng.uniform(0, max_deg)))


def random_transform(rng, max_deg=180.0, max_t=1.0):
    return RigidTransform(random_rotation(rng, max_deg), rng.uniform(-max_t, max_t, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def cloud(rng):
    return PointCloud(rng.normal(size=(24, 3)))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
