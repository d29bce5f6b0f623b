import logging

import numpy as np
import pytest

from tangentsafe.kinematics import (
    Attachment,
    Joint,
    SerialChain,
    SphereCover,
    make_transform,
    rot_axis_angle,
)
from tangentsafe.scenario import builtin_scenario_path, load_scenario


def planar_chain(lengths, limit=np.pi):
    """Planar revolute chain about z; joint k+1 sits at the tip of link k."""
    joints = []
    prev = 0.0
    for length in lengths:
        joints.append(Joint([0, 0, 1], make_transform(translation=[prev, 0, 0])))
        prev = length
    n = len(lengths)
    return SerialChain(joints, -limit * np.ones(n), limit * np.ones(n))


def random_chain(rng, n):
    joints = []
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        raxis = rng.normal(size=3)
        raxis /= np.linalg.norm(raxis)
        origin = make_transform(rot_axis_angle(raxis, rng.uniform(-np.pi, np.pi)),
                                rng.uniform(-0.5, 0.5, 3))
        joints.append(Joint(axis, origin))
    base = make_transform(rot_axis_angle(np.array([0.0, 0.0, 1.0]), 0.3), [0.1, -0.2, 0.05])
    return SerialChain(joints, -3 * np.ones(n), 3 * np.ones(n), base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def planar3():
    return planar_chain([0.6, 0.5, 0.4])


@pytest.fixture
def planar3_cover():
    return SphereCover([
        (Attachment(1, [0.3, 0, 0]), 0.05),
        (Attachment(2, [0.25, 0, 0]), 0.05),
        (Attachment(3, [0.4, 0, 0]), 0.05),
    ])


@pytest.fixture(scope="session")
def manipulation():
    return load_scenario(builtin_scenario_path("manipulation"))


@pytest.fixture(scope="session")
def airhockey():
    return load_scenario(builtin_scenario_path("airhockey"))


@pytest.fixture(autouse=True)
def _quiet_logs(caplog):
    caplog.set_level(logging.WARNING)
    yield


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def record_criterion(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
