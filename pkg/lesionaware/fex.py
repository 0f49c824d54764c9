"""Residual feature extractor producing the multi-scale pyramid.

A stride-2 3x3 stem followed by `n_stages` stages of residual blocks. The first stage keeps the
stem's resolution and every later stage halves it, so with `input_size=M` the emitted levels have
spatial sizes `M/2, M/4, ..., M/2^n`.
"""
import logging
from dataclasses import dataclass

import numpy as np

from ._utils import seeded_rng
from .config import FexConfig
from .errors import DimensionError
from .layers import BatchNorm2d, Conv2d, Module, ModuleList
from .tensor import Tensor, activate


__all__ = ['BasicBlock', 'Bottleneck', 'FeatureExtractor', 'FeaturePyramid', 'build_fex', 'extract']

log = logging.getLogger(__name__)


@dataclass
class FeaturePyramid:
    """Ordered feature maps `[f_1, ..., f_n]`, each half the spatial size of the previous one."""

    maps: list

    def __len__(self):
        return len(self.maps)

    def __iter__(self):
        return iter(self.maps)

    def __getitem__(self, index):
        return self.maps[index]

    @property
    def top(self):
        return self.maps[-1]

    @property
    def sizes(self):
        return [f.shape[2] for f in self.maps]


class _Shortcut(Module):
    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 1, rng, stride=stride, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    def forward(self, x):
        return self.bn(self.conv(x))


class BasicBlock(Module):
    """Two 3x3 conv+BN layers with an identity or 1x1-projection shortcut."""

    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(
            in_channels, out_channels, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype
        )
        self.bn1 = BatchNorm2d(out_channels, dtype=dtype)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(out_channels, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = _Shortcut(in_channels, out_channels, stride, rng, dtype)

    def forward(self, x):
        out = activate(self.bn1(self.conv1(x)), 'relu')
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return activate(out + identity, 'relu')


class Bottleneck(Module):
    """1x1 reduce, 3x3, 1x1 expand (x4) with a projection shortcut when shapes change."""

    expansion = 4

    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        super().__init__()
        width = out_channels // self.expansion
        self.conv1 = Conv2d(in_channels, width, 1, rng, bias=False, dtype=dtype)
        self.bn1 = BatchNorm2d(width, dtype=dtype)
        self.conv2 = Conv2d(width, width, 3, rng, stride=stride, padding=1, bias=False, dtype=dtype)
        self.bn2 = BatchNorm2d(width, dtype=dtype)
        self.conv3 = Conv2d(width, out_channels, 1, rng, bias=False, dtype=dtype)
        self.bn3 = BatchNorm2d(out_channels, dtype=dtype)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = _Shortcut(in_channels, out_channels, stride, rng, dtype)

    def forward(self, x):
        out = activate(self.bn1(self.conv1(x)), 'relu')
        out = activate(self.bn2(self.conv2(out)), 'relu')
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut(x)
        return activate(out + identity, 'relu')


BLOCKS = {'basic': BasicBlock, 'bottleneck': Bottleneck}


class FeatureExtractor(Module):
    def __init__(self, config, rng, dtype=np.float64):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(dtype)
        block = BLOCKS[config.block]

        self.stem = Conv2d(
            config.in_channels, config.stem_channels, 3, rng, stride=2, padding=1, bias=False,
            dtype=dtype,
        )
        self.stem_bn = BatchNorm2d(config.stem_channels, dtype=dtype)
        self.stages = ModuleList()
        in_channels = config.stem_channels
        for index, (channels, blocks) in enumerate(
            zip(config.channels_per_stage, config.blocks_per_stage)
        ):
            stride = 1 if index == 0 else 2
            stage = ModuleList()
            for block_index in range(blocks):
                stage.append(block(in_channels, channels, stride if block_index == 0 else 1, rng, dtype))
                in_channels = channels
            self.stages.append(stage)

    @property
    def channels(self):
        return list(self.config.channels_per_stage)

    def forward(self, images):
        size = self.config.input_size
        expected = (self.config.in_channels, size, size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise DimensionError(
                f'extract: expects images shaped [N, {expected[0]}, {size}, {size}], got {images.shape}'
            )
        x = activate(self.stem_bn(self.stem(images)), 'relu')
        maps = []
        for stage in self.stages:
            for block in stage:
                x = block(x)
            maps.append(x)
        return FeaturePyramid(maps)


def build_fex(config, seed, dtype=np.float64):
    """Seeded extractor; equal seeds give bit-identical parameters."""
    if not isinstance(config, FexConfig):
        config = FexConfig.from_dict(config)
    config.validate()
    extractor = FeatureExtractor(config, seeded_rng(seed, 'fex'), dtype=dtype)
    log.debug(
        'built %s extractor: %d parameters, level sizes %s',
        config.block,
        sum(p.size for p in extractor.parameters()),
        config.level_sizes,
    )
    return extractor


def extract(extractor, image_batch):
    if not isinstance(image_batch, Tensor):
        image_batch = Tensor(np.asarray(image_batch, dtype=extractor.dtype))
    return extractor(image_batch)
