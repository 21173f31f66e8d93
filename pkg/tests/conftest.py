import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from torus_spde.spectral import FourierGrid

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: list[str] = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    line = f"{name}: {'PASS' if passed else 'FAIL'}  {detail}".rstrip()
    _ACCEPTANCE.append(line)
    print(line)


@pytest.fixture
def report():
    return record_acceptance


@pytest.fixture(scope="session")
def grid16():
    return FourierGrid(16)


@pytest.fixture(scope="session")
def grid32():
    return FourierGrid(32)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
