import numpy as np
import pytest

from mupscale.linalg import make_rng
from mupscale.model import MlpModel, MlpSpec
from mupscale.mup import BaseConstants, init_weights


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_model(widths, seed=0, activation="relu", readout="mean", bias=False, m=1, trainable=None, init_std=1.0):
    spec = MlpSpec(tuple(widths), activation, readout, trainable=trainable, bias=bias)
    base = BaseConstants(init_std=init_std)
    return init_weights(MlpModel.zeros(spec), base, make_rng(seed, 1), m=m)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
