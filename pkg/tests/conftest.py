import numpy as np
import pytest
import torch

from scarnet.config import RunConfig, load_config
from scarnet.model import ModelConfig
from scarnet.phantom import make_phantom_set

TINY = [
    "model.image_size=32",
    "model.branch.patch_size=8",
    "model.branch.d=32",
    "model.branch.L=1",
    "model.branch.num_heads=4",
    "model.branch.neck_channels=[32, 16, 16, 8]",
    "model.unet.base_channels=8",
    "model.fusion.common_channels=16",
    "model.fusion.attn_grid=8",
]


def tiny_config(*extra) -> RunConfig:
    return load_config(overrides=list(TINY) + list(extra))


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    return tiny_config().model


@pytest.fixture(scope="session")
def phantoms32():
    return make_phantom_set(8, seed=11, height=32, width=32)


def central_difference(fn, x: torch.Tensor, index, h=1e-4):
    """d fn / d x[index] by central differences (x is modified and restored)."""
    with torch.no_grad():
        orig = x[index].item()
        x[index] = orig + h
        up = float(fn())
        x[index] = orig - h
        down = float(fn())
        x[index] = orig
    return (up - down) / (2 * h)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
