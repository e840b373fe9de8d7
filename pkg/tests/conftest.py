import numpy as np
import pytest
import torch

from lfcodec.lfdata import LightFieldGrid
from lfcodec.model import LFCodecModel
from lfcodec.synthetic import SceneSpec, make_scene
from lfcodec.transforms import TransformConfig


@pytest.fixture(scope="session")
def scene64() -> LightFieldGrid:
    return make_scene(SceneSpec(h=64, w=64, seed=7))


@pytest.fixture(scope="session")
def small_cfg() -> TransformConfig:
    return TransformConfig(channels=8, hidden=8, disparity_hidden=4)


@pytest.fixture
def small_model(small_cfg) -> LFCodecModel:
    torch.manual_seed(0)
    return LFCodecModel(small_cfg).eval()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS, line

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(line(number))
