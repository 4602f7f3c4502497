import os
import sys

import pytest
from hypothesis import HealthCheck, settings

from lorentzgas.dynamics import BilliardSystem, NoForce, ThermostattedConstantField
from lorentzgas.geometry import TableConfig

sys.path.insert(0, os.path.dirname(__file__))

from acceptance_log import LINES  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def table():
    return TableConfig.default()


@pytest.fixture(scope="session")
def free_system(table):
    return BilliardSystem(table, NoForce())


@pytest.fixture(scope="session")
def forced_system(table):
    return BilliardSystem(table, ThermostattedConstantField(0.05, 0.0))


def pytest_terminal_summary(terminalreporter):
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
