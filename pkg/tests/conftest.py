import numpy as np
import pytest

from occgrasp.cvae import CvaeModel
from occgrasp.skills import PivotPolicy


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def untrained_policies():
    # small random networks: enough for plumbing tests, useless for success
    return PivotPolicy.create(hidden=16, seed=3), CvaeModel.create(64, latent_dim=4, hidden=32, seed=4)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
