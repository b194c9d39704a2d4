import os

import pytest
from hypothesis import HealthCheck, settings

from metanet_calib import scenarios

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=500)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def bottleneck():
    return scenarios.generate_bottleneck()


@pytest.fixture(scope="session")
def ramped():
    return scenarios.generate_ramped()


def pytest_terminal_summary(terminalreporter):
    import _acceptance_log

    lines = _acceptance_log.summary_lines()
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
