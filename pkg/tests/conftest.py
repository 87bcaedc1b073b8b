import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from histmatch.sims import SIRS_OUTPUTS, SIRS_SPACE, make_wave0
from histmatch.training import emulator_from_data

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def sirs_wave0():
    return make_wave0(seed=0)


@pytest.fixture(scope="session")
def sirs_ems(sirs_wave0):
    train, _ = sirs_wave0
    return emulator_from_data(train, list(SIRS_OUTPUTS), SIRS_SPACE)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.REPORT, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
