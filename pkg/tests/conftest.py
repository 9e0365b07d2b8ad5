import numpy as np
import pytest

from rigidflow import synth
from rigidflow.geometry import CameraRig

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rig():
    return CameraRig(fx=100.0, fy=110.0, cx=50.0, cy=30.0, baseline=0.5)


@pytest.fixture(scope="session")
def scenes():
    """Ground-truth bundles of every preset at 96 x 128, generated once."""
    return {name: synth.generate(synth.preset(name)) for name in synth.PRESETS}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
