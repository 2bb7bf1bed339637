import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

os.environ.setdefault("OMP_NUM_THREADS", "1")

import torch  # noqa: E402

from explainseg.classifier import ClassifierParams  # noqa: E402

torch.set_num_threads(1)

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def detector_params(threshold=0.5, gain=10.0, offset=1.0):
    """One-channel network whose logit is gain * relu(max(x) - threshold) - offset.

    The conv taps are centered single ones, so the network only asks whether
    any voxel is brighter than ``threshold``.
    """
    p = ClassifierParams.zeros(1, 1)
    p.w1[0, 0, 1, 1, 1] = 1.0
    p.b1[0] = -threshold
    p.w2[0, 0, 1, 1, 1] = 1.0
    p.w3[0] = gain
    p.b3[0] = -offset
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_params():
    return ClassifierParams.random(4, 6, seed=3)
