import sys

import numpy as np
import pytest

from latentvis import synthdata, toyvlm


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def gen_params():
    return synthdata.GenParams()


@pytest.fixture(scope="session")
def small_data(gen_params):
    samples, header = synthdata.generate(24, gen_params, seed=5, aux_unnecessary_fraction=0.25)
    return samples, header


@pytest.fixture
def state():
    return toyvlm.ModelState.init(toyvlm.ModelConfig(seed=3))


@pytest.fixture(scope="session")
def tiny_config():
    # small enough for finite differences in a few seconds
    return toyvlm.ModelConfig(d_model=16, d_vis=16, n_layers=2, n_heads=2, raw_dim=48,
                              detrans_layers=1, seed=1)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.REPORT:
        terminalreporter.section("acceptance criteria")
        for line in mod.REPORT:
            terminalreporter.write_line(line)
