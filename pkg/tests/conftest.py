import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from angiorecon.geometry import ViewGeometry

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_view(primary=0.0, secondary=0.0, sid=1000.0, sod=750.0, spacing=0.3, size=512, shift=(0.0, 0.0)):
    return ViewGeometry(primary, secondary, sid, sod, spacing, (size, size), ((size - 1) / 2, (size - 1) / 2), shift)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def view_pair():
    return make_view(30.0, 0.0), make_view(-30.0, 20.0)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
