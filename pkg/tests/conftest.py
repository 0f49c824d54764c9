import numpy as np
import pytest

from lesionaware.config import FexConfig, LanetConfig, ModelConfig, SynthConfig, TrainConfig
from lesionaware.data import generate_synthetic
from lesionaware.model import build_model


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False, help='run slow training checks')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(
        fex=FexConfig(
            n_stages=2, stem_channels=4, channels_per_stage=[4, 8], blocks_per_stage=[1, 1],
            input_size=16,
        ),
        lanet=LanetConfig(reduction=2, sam_kernel=3),
        dtype='float64',
    )


@pytest.fixture
def tiny_model(tiny_model_config):
    return build_model(tiny_model_config, seed=0)


@pytest.fixture
def tiny_dataset():
    return generate_synthetic(SynthConfig(per_class=4, size=16, seed=3))


@pytest.fixture
def quick_train_config():
    return TrainConfig(
        stage1_epochs=1, stage2_epochs=2, batch_labeled=2, batch_unlabeled=2, val_fraction=0.25,
        augment=False,
    )
