import numpy as np
import pytest

from foloc.dynsim import build_swing_system, gen_ambient
from foloc.respinfer import infer_bank_states
from foloc.systems import gen2, ring8

DT = 0.02
AMBIENT_S = 1200.0


@pytest.fixture(scope="session")
def gen2_sys():
    return build_swing_system(gen2())


@pytest.fixture(scope="session")
def ring8_sys():
    return build_swing_system(ring8())


@pytest.fixture(scope="session")
def gen2_ambient(gen2_sys):
    return gen_ambient(gen2_sys, AMBIENT_S, DT, seed=101)


@pytest.fixture(scope="session")
def ring8_ambient(ring8_sys):
    return gen_ambient(ring8_sys, AMBIENT_S, DT, seed=202)


@pytest.fixture(scope="session")
def gen2_bank(gen2_ambient):
    return infer_bank_states(gen2_ambient)


@pytest.fixture(scope="session")
def ring8_bank(ring8_ambient):
    return infer_bank_states(ring8_ambient)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
