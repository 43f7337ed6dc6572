import numpy as np
import pytest

from kconfig import NetConfig, SceneConfig, TrainConfig


def pytest_addoption(parser):
    parser.addoption('--benchmark', action='store_true', help='run the full ablation benchmark')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--benchmark'):
        return
    skip = pytest.mark.skip(reason='full ablation benchmark, run with --benchmark')
    for item in items:
        if item.get_closest_marker('benchmark'):
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scene_cfg():
    return SceneConfig(width=64, height=32, num_layers=4)


@pytest.fixture
def tiny_net_cfg():
    return NetConfig(base_width=8, blocks_per_stage=(1, 1), dropout_p=0.0, rho_init=0.1)


@pytest.fixture
def train_cfg():
    return TrainConfig(batch_size=2, max_epochs=2, beta=1.0, gamma=0.5, seed=3)
