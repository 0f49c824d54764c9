import numpy as np
import pytest

from lesionaware.config import FEX_PRESETS, FexConfig
from lesionaware.errors import ConfigError, DimensionError
from lesionaware.fex import BasicBlock, Bottleneck, build_fex, extract
from lesionaware.tensor import Tensor
from ._test_utils import gradcheck, random_tensor


@pytest.fixture
def small_config():
    return FexConfig(
        n_stages=3, stem_channels=4, channels_per_stage=[4, 8, 8], blocks_per_stage=[1, 2, 1],
        input_size=32,
    )


def test_pyramid_sizes_and_channels(small_config, rng):
    extractor = build_fex(small_config, seed=0)
    pyramid = extract(extractor, rng.uniform(size=(2, 1, 32, 32)))
    assert len(pyramid) == 3
    assert pyramid.sizes == [16, 8, 4] == small_config.level_sizes
    assert [f.shape[1] for f in pyramid] == [4, 8, 8]
    assert pyramid.top is pyramid[-1]


def test_bottleneck_extractor(rng):
    config = FexConfig(
        n_stages=2, stem_channels=4, channels_per_stage=[8, 16], blocks_per_stage=[1, 1],
        input_size=16, block='bottleneck',
    )
    extractor = build_fex(config, seed=0)
    assert isinstance(extractor.stages[0][0], Bottleneck)
    pyramid = extract(extractor, rng.uniform(size=(1, 1, 16, 16)))
    assert [f.shape for f in pyramid] == [(1, 8, 8, 8), (1, 16, 4, 4)]


def test_same_seed_same_parameters(small_config):
    a, b, c = build_fex(small_config, 5), build_fex(small_config, 5), build_fex(small_config, 6)
    for (name_a, p_a), (name_b, p_b) in zip(a.named_parameters(), b.named_parameters()):
        assert name_a == name_b
        assert np.array_equal(p_a.data, p_b.data)
    assert not np.array_equal(a.stem.weight.data, c.stem.weight.data)


def test_wrong_input_shape(small_config):
    extractor = build_fex(small_config, seed=0)
    with pytest.raises(DimensionError, match=r'expects images shaped \[N, 1, 32, 32\]'):
        extract(extractor, np.zeros((1, 1, 16, 16)))


@pytest.mark.parametrize('overrides,match', [
    ({'input_size': 20}, 'multiple of 2'),
    ({'channels_per_stage': [4, 8]}, 'one entry per stage'),
    ({'block': 'dense'}, 'unknown block type'),
    ({'n_stages': 1, 'channels_per_stage': [4], 'blocks_per_stage': [1]}, 'n_stages'),
])
def test_invalid_configs(small_config, overrides, match):
    with pytest.raises(ConfigError, match=match):
        FexConfig.from_dict({**small_config.to_dict(), **overrides})


def test_presets():
    resnet18 = FexConfig.preset('resnet18')
    assert resnet18.blocks_per_stage == [2, 2, 2, 2]
    assert resnet18.channels_per_stage == [64, 128, 256, 512]
    resnet50 = FexConfig.preset('resnet50', input_size=512)
    assert resnet50.block == 'bottleneck'
    assert resnet50.level_sizes == [256, 128, 64, 32]
    assert set(FEX_PRESETS) == {'desk', 'resnet18', 'resnet50'}
    with pytest.raises(ConfigError, match='unknown FEX preset'):
        FexConfig.preset('vgg16')


def test_basic_block_gradients(rng):
    block = BasicBlock(2, 3, stride=2, rng=rng, dtype=np.float64)
    x = random_tensor(rng, 2, 2, 4, 4)
    weights = Tensor(rng.normal(size=(2, 3, 2, 2)))
    gradcheck(lambda: (block(x) * weights).sum(), [x, block.conv1.weight])


@pytest.mark.parametrize('block', ['basic', 'bottleneck'])
def test_every_parameter_receives_gradient(small_config, rng, block):
    config = FexConfig.from_dict({**small_config.to_dict(), 'block': block})
    extractor = build_fex(config, seed=0)
    pyramid = extract(extractor, rng.uniform(size=(2, 1, 32, 32)))
    loss = None
    for f in pyramid:
        term = (f * Tensor(rng.normal(size=f.shape))).sum()
        loss = term if loss is None else loss + term
    loss.backward()
    dead = [name for name, p in extractor.named_parameters() if not np.any(p.grad != 0)]
    assert dead == []
