"""Lesion-aware branch: attention refinement of every pyramid level fused into one lesion mask.

Each level goes through a convolutional block attention module, channel attention (CAM) then
spatial attention (SAM), is squeezed to a single channel by a 1x1 conv and resized to the top
level's size. The `n` squeezed maps are concatenated and a conv -> BN -> sigmoid head turns them
into per-pixel lesion probabilities.

The SAM conv always sees two channels (channel max and channel mean), so one instance serves every
level. CAM perceptrons depend on the level's channel count; with `cam_sharing='per_level'` each
level has its own, with `cam_sharing='projected'` every level is first projected by a 1x1 conv to
the narrowest level's width and a single CAM is shared.
"""
import logging

from .errors import ConfigError, DimensionError
from .layers import BatchNorm2d, Conv2d, Linear, Module, ModuleList
from .tensor import activate, channel_pool, concat, pool2d, resize_bilinear


__all__ = [
    'ChannelAttention',
    'LesionAwareNet',
    'SpatialAttention',
    'cam_refine',
    'cbam',
    'fuse_predict',
    'sam_refine',
]

log = logging.getLogger(__name__)


class ChannelAttention(Module):
    """Shared two-layer perceptron over the global max- and avg-pooled channel descriptors."""

    def __init__(self, channels, reduction, rng, dtype):
        super().__init__()
        self.channels = channels
        hidden = max(1, channels // reduction)
        self.fc1 = Linear(channels, hidden, rng, bias=False, dtype=dtype)
        self.fc2 = Linear(hidden, channels, rng, bias=False, dtype=dtype)

    def mlp(self, descriptor):
        return self.fc2(activate(self.fc1(descriptor), 'relu'))

    def attention(self, f):
        if f.ndim != 4 or f.shape[1] != self.channels:
            raise DimensionError(
                f'cam: expects {self.channels} channels, got feature map of shape {f.shape}'
            )
        n, c = f.shape[:2]
        max_descriptor = pool2d(f, 'max').reshape(n, c)
        avg_descriptor = pool2d(f, 'avg').reshape(n, c)
        return activate(self.mlp(max_descriptor) + self.mlp(avg_descriptor), 'sigmoid')

    def forward(self, f):
        n, c = f.shape[:2]
        return f * self.attention(f).reshape(n, c, 1, 1)


class SpatialAttention(Module):
    def __init__(self, kernel_size, rng, dtype):
        super().__init__()
        self.conv = Conv2d(2, 1, kernel_size, rng, padding=kernel_size // 2, bias=False, dtype=dtype)

    def attention(self, f):
        pooled = concat([channel_pool(f, 'max'), channel_pool(f, 'avg')], axis=1)
        return activate(self.conv(pooled), 'sigmoid')

    def forward(self, f):
        return f * self.attention(f)


def cam_refine(f, params):
    return params(f)


def sam_refine(f, params):
    return params(f)


def cbam(f, cam_params, sam_params, use_cam=True, use_sam=True):
    """CAM then SAM; a disabled stage passes its input through unchanged."""
    if use_cam:
        f = cam_refine(f, cam_params)
    if use_sam:
        f = sam_refine(f, sam_params)
    return f


class LesionAwareNet(Module):
    def __init__(self, config, channels, rng, dtype):
        super().__init__()
        self.config = config
        self.channels = list(channels)
        self.use_cam = True
        self.use_sam = True

        if config.cam_sharing == 'per_level':
            self.projections = None
            self.cams = ModuleList(
                ChannelAttention(c, config.reduction, rng, dtype) for c in self.channels
            )
            refined_channels = self.channels
        else:
            width = min(self.channels)
            self.projections = ModuleList(
                Conv2d(c, width, 1, rng, bias=False, dtype=dtype) for c in self.channels
            )
            self.shared_cam = ChannelAttention(width, config.reduction, rng, dtype)
            refined_channels = [width] * len(self.channels)

        self.sam = SpatialAttention(config.sam_kernel, rng, dtype)
        self.squeezes = ModuleList(Conv2d(c, 1, 1, rng, dtype=dtype) for c in refined_channels)
        self.head = Conv2d(
            len(self.channels), 1, config.head_kernel, rng, padding=config.head_kernel // 2,
            bias=False, dtype=dtype,
        )
        self.head_bn = BatchNorm2d(1, dtype=dtype)

    @property
    def n_levels(self):
        return len(self.channels)

    def cam_for(self, level):
        return self.cams[level] if self.projections is None else self.shared_cam

    def refine(self, f, level):
        if self.projections is not None:
            f = self.projections[level](f)
        return cbam(f, self.cam_for(level), self.sam, use_cam=self.use_cam, use_sam=self.use_sam)

    def forward(self, pyramid):
        return fuse_predict(pyramid, self)


def fuse_predict(pyramid, lanet):
    """Lesion probabilities `[N, 1, S_n, S_n]` from an `n`-level pyramid."""
    if len(pyramid) != lanet.n_levels:
        raise ConfigError(
            f'lanet expects {lanet.n_levels} pyramid levels, got {len(pyramid)}'
        )
    top_h, top_w = pyramid[-1].shape[2:]
    squeezed = []
    for level, f in enumerate(pyramid):
        refined = lanet.refine(f, level)
        squeezed.append(resize_bilinear(lanet.squeezes[level](refined), top_h, top_w))
    merged = concat(squeezed, axis=1)
    return activate(lanet.head_bn(lanet.head(merged)), 'sigmoid')
