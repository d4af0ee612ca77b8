import numpy as np
import pytest

from lmdm.dit import DiT, ModelConfig


@pytest.fixture
def tiny_cfg():
    return ModelConfig(channels=3, hidden=16, layers=2, heads=2, head_dim=8,
                       context_frames=4, target_frames=2, cond_dim=3)


@pytest.fixture
def tiny_model(tiny_cfg):
    return DiT.init(tiny_cfg, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
