"""Mask attention on the top feature map and the classification head.

    >>> from lesionaware.tensor import Tensor
    >>> f = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    >>> mam_enhance(f, Tensor([[[[0.5, 0.0], [1.0, 0.25]]]])).data.tolist()
    [[[[1.5, 2.0], [6.0, 5.0]]]]
"""
import logging

from .errors import ConfigError, DimensionError
from .layers import Linear, Module
from .tensor import activate, pool2d


__all__ = ['ClassifierHead', 'classify', 'mam_enhance']

log = logging.getLogger(__name__)


def mam_enhance(f_n, mask):
    """`f_n + f_n * mask`, the single-channel mask broadcast over channels."""
    expected = (f_n.shape[0], 1) + f_n.shape[2:]
    if mask.shape != expected:
        raise DimensionError(
            f'mam: mask {mask.shape} does not match feature map {f_n.shape} (needs [N, 1, H, W])'
        )
    return f_n + f_n * mask


class ClassifierHead(Module):
    """Global average pooling then one fully-connected layer of `num_classes` logits."""

    def __init__(self, in_channels, num_classes, rng, dtype):
        super().__init__()
        if num_classes < 2:
            raise ConfigError(f'num_classes must be >= 2, got {num_classes}')
        self.num_classes = num_classes
        self.fc = Linear(in_channels, num_classes, rng, dtype=dtype)

    def logits(self, f_att):
        n, c = f_att.shape[:2]
        return self.fc(pool2d(f_att, 'avg').reshape(n, c))

    def forward(self, f_att):
        return activate(self.logits(f_att), 'softmax', axis=1)


def classify(f_att, params):
    return params(f_att)
