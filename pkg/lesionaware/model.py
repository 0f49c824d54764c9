"""Full network: extractor, lesion-aware branch and mask-attention classifier.

Ablation flags on `ModelConfig` switch parts off: `use_lanet=False` gives a plain residual
classifier (no mask, no MAM), `use_cam` / `use_sam` bypass the attention stages inside the branch,
and `use_mam=False` classifies the raw top feature map while the branch is still trained.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ._utils import seeded_rng
from .classifier import ClassifierHead, mam_enhance
from .config import ModelConfig
from .errors import DimensionError
from .fex import FeatureExtractor, FeaturePyramid
from .lanet import LesionAwareNet
from .layers import Module
from .tensor import Tensor, activate, no_grad


__all__ = ['LesionAwareModel', 'ModelOutput', 'Prediction', 'build_model']

log = logging.getLogger(__name__)


@dataclass
class ModelOutput:
    pyramid: FeaturePyramid
    mask: Optional[Tensor]
    features: Optional[Tensor] = None
    logits: Optional[Tensor] = None
    probs: Optional[Tensor] = None


@dataclass
class Prediction:
    probs: np.ndarray
    masks: Optional[np.ndarray]

    @property
    def labels(self):
        return self.probs.argmax(axis=1)


class LesionAwareModel(Module):
    def __init__(self, config, seed):
        super().__init__()
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self.seed = seed
        channels = config.fex.channels_per_stage

        self.fex = FeatureExtractor(config.fex, seeded_rng(seed, 'fex'), dtype=self.dtype)
        self.lanet = None
        if config.use_lanet:
            self.lanet = LesionAwareNet(config.lanet, channels, seeded_rng(seed, 'lanet'), self.dtype)
            self.lanet.use_cam = config.use_cam
            self.lanet.use_sam = config.use_sam
        self.head = ClassifierHead(
            channels[-1], config.num_classes, seeded_rng(seed, 'classifier'), self.dtype
        )

    @property
    def input_size(self):
        return self.config.fex.input_size

    @property
    def mask_size(self):
        return self.config.fex.level_sizes[-1]

    def localization_parameters(self):
        """Extractor and branch parameters, the ones stage 1 trains."""
        params = self.fex.parameters()
        if self.lanet is not None:
            params += self.lanet.parameters()
        return params

    def as_input(self, images):
        if isinstance(images, Tensor):
            images = images.data
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[:, None]
        if images.ndim != 4:
            raise DimensionError(f'model: expects images shaped [N, C, H, W], got {images.shape}')
        return Tensor(images)

    def forward(self, images, classify=True):
        return self.forward_from_pyramid(self.fex(self.as_input(images)), classify)

    def forward_from_pyramid(self, pyramid, classify=True):
        mask = self.lanet(pyramid) if self.lanet is not None else None
        if not classify:
            return ModelOutput(pyramid, mask)

        features = pyramid.top
        if mask is not None and self.config.use_mam:
            features = mam_enhance(features, mask)
        logits = self.head.logits(features)
        return ModelOutput(pyramid, mask, features, logits, activate(logits, 'softmax', axis=1))

    def predict(self, images, batch_size=16):
        """Eval-mode class probabilities and lesion masks for a stack of images, untracked."""
        was_training = self.training
        self.eval()
        probs, masks = [], []
        try:
            with no_grad():
                for start in range(0, len(images), batch_size):
                    output = self.forward(np.asarray(images[start:start + batch_size]))
                    probs.append(output.probs.data)
                    if output.mask is not None:
                        masks.append(output.mask.data[:, 0])
        finally:
            self.train(was_training)
        return Prediction(
            np.concatenate(probs) if probs else np.zeros((0, self.config.num_classes)),
            np.concatenate(masks) if masks else None,
        )


def build_model(config=None, seed=0):
    if config is None:
        config = ModelConfig()
    elif not isinstance(config, ModelConfig):
        config = ModelConfig.from_dict(config)
    config.validate()
    model = LesionAwareModel(config, seed)
    log.info(
        'built model: %d parameters, input %dx%d, mask %dx%d, lanet=%s mam=%s',
        sum(p.size for p in model.parameters()),
        model.input_size,
        model.input_size,
        model.mask_size,
        model.mask_size,
        config.use_lanet,
        config.use_mam and config.use_lanet,
    )
    return model
