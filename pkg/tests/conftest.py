import numpy as np
import pytest

from jmlab.rq_model import ModelConfig
from jmlab.token_grid import build_schema

# acceptance lines collected by test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def schema():
    return build_schema("dialogue", 8, 12, 6)


@pytest.fixture
def tts_schema():
    return build_schema("tts", 8, 12, 6)


@pytest.fixture
def tiny_config(schema):
    return ModelConfig(schema, d_model=8, n_heads=2, temporal_layers=2, depth_layers=1, max_frames=16, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
