"""Losses, the optimizer and the two-stage training procedure.

Stage 1 pre-trains the extractor and the lesion-aware branch on location-labeled samples only.
Stage 2 trains everything on the whole (incompletely labeled) training set with the hybrid loss

    L_hyb = lam * L_cls + (1 - lam) * (L_loc(labeled) + alpha * L_loc(unlabeled, pseudo-labels))

where the pseudo-labels are the branch's own predictions thresholded at `tau`.

    >>> from lesionaware.tensor import Tensor
    >>> round(localization_loss(Tensor([0.9, 0.2]), [1.0, 0.0]).item(), 4)
    0.1643
    >>> binarize(Tensor([0.85, 0.5, 0.8]), 0.8).data.tolist()
    [1.0, 0.0, 1.0]
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from ._utils import seeded_rng
from .config import AugmentConfig, TrainConfig
from .data import augment, rasterize_location
from .errors import ConfigError, DimensionError, NumericError, UsageError, ValidationError
from .metrics import binarize_mask, jsi
from .tensor import Tensor, backward


__all__ = [
    'EPOCH_LOG_COLUMNS',
    'OptimizerState',
    'StageOneResult',
    'TrainResult',
    'adam_step',
    'binarize',
    'classification_loss',
    'hybrid_loss',
    'localization_loss',
    'semi_localization_loss',
    'train',
    'train_stage1',
    'train_stage2',
    'write_log',
]

log = logging.getLogger(__name__)

EPS = 1e-7
EPOCH_LOG_COLUMNS = [
    'epoch', 'L_cls', 'L_loc_labeled', 'L_loc_pseudo', 'L_hyb', 'val_accuracy', 'val_JSI',
]
STAGE1_LOG_COLUMNS = ['epoch', 'L_loc']


# --------------------------------------------------------------------------------------------------
# Losses
# --------------------------------------------------------------------------------------------------
def _is_binary(array):
    return bool(np.all((array == 0.0) | (array == 1.0)))


def localization_loss(pred, gt):
    """Mean binary cross-entropy between lesion probabilities and a binary target."""
    gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=pred.dtype)
    if gt.shape != pred.shape:
        raise DimensionError(f'localization_loss: target {gt.shape} does not match {pred.shape}')
    if not _is_binary(gt):
        raise ValidationError('localization_loss: target mask must be binary')
    p = pred.clip(EPS, 1.0 - EPS)
    target = Tensor(gt)
    per_pixel = target * p.log() + (1.0 - target) * (1.0 - p).log()
    return -per_pixel.mean()


def classification_loss(probs, labels):
    """Mean `-log p_true` for one-hot `labels` `[N, K]`."""
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=probs.dtype)
    if labels.shape != probs.shape:
        raise DimensionError(f'classification_loss: labels {labels.shape} do not match {probs.shape}')
    if not _is_binary(labels) or not np.all(labels.sum(axis=1) == 1.0):
        raise ValidationError('classification_loss: labels must be one-hot rows')
    log_p = probs.clip(EPS, 1.0).log()
    return -(Tensor(labels) * log_p).sum() * (1.0 / probs.shape[0])


def one_hot(labels, num_classes, dtype=np.float64):
    return np.eye(num_classes, dtype=dtype)[np.asarray(labels, dtype=int)]


def binarize(pred, tau):
    """Pseudo-labels `p >= tau`, returned as a constant (no gradient reaches the predictions)."""
    data = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    return Tensor((data >= tau).astype(data.dtype))


def _is_empty(pred):
    return pred is None or pred.size == 0


def semi_localization_terms(pred_labeled, gt_labeled, pred_unlabeled, tau):
    """The labeled and pseudo-labeled BCE terms; an empty part contributes `None`."""
    if _is_empty(pred_labeled) and _is_empty(pred_unlabeled):
        raise UsageError('semi_localization_loss: both the labeled and the unlabeled part are empty')
    labeled = None if _is_empty(pred_labeled) else localization_loss(pred_labeled, gt_labeled)
    pseudo = None
    if not _is_empty(pred_unlabeled):
        pseudo = localization_loss(pred_unlabeled, binarize(pred_unlabeled, tau))
    return labeled, pseudo


def _combine_terms(labeled, pseudo, alpha):
    if pseudo is None:
        return labeled
    if labeled is None:
        return pseudo * alpha
    return labeled + pseudo * alpha


def semi_localization_loss(pred_labeled, gt_labeled, pred_unlabeled, alpha, tau):
    labeled, pseudo = semi_localization_terms(pred_labeled, gt_labeled, pred_unlabeled, tau)
    return _combine_terms(labeled, pseudo, alpha)


def hybrid_loss(cls_term, semi_loc_term, lam):
    """`lam * cls_term + (1 - lam) * semi_loc_term`.

    >>> round(hybrid_loss(0.4, 0.2, 0.5), 12)
    0.3
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f'lambda must lie in [0, 1], got {lam}')
    return cls_term * lam + semi_loc_term * (1.0 - lam)


# --------------------------------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------------------------------
@dataclass
class OptimizerState:
    """Adam moments keyed by parameter name."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update of `params` (`{name: Tensor}`) in place.

    Every gradient is checked before anything is touched, so a non-finite gradient leaves the
    parameters and the state as they were.
    """
    for name, grad in grads.items():
        if name not in params:
            raise KeyError(f'adam_step: gradient for unknown parameter {name!r}')
        if grad.shape != params[name].shape:
            raise DimensionError(
                f'adam_step: gradient {grad.shape} does not match parameter {name} {params[name].shape}'
            )
        if not np.isfinite(grad).all():
            raise NumericError(f'adam_step: non-finite gradient for {name}')

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for name, grad in grads.items():
        param = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        update = (lr / bias1) * m / (np.sqrt(v / bias2) + state.eps)
        param.data -= update.astype(param.data.dtype)
    return params, state


def _trainable(model, names=None):
    named = dict(model.named_parameters())
    if names is None:
        return named
    return {name: named[name] for name in names}


def _optimize(loss, params, state, lr):
    for param in params.values():
        param.zero_grad()
    backward(loss)
    adam_step(params, {name: p.grad for name, p in params.items()}, state, lr)


# --------------------------------------------------------------------------------------------------
# Batches
# --------------------------------------------------------------------------------------------------
@dataclass
class Batch:
    images: np.ndarray
    labels: np.ndarray
    # location targets for the first `n_located` samples
    targets: np.ndarray
    n_located: int


def check_image_size(model, dataset):
    if len(dataset) and dataset.image_size != model.input_size:
        raise DimensionError(
            f'dataset images are {dataset.image_size}x{dataset.image_size}, '
            f'the model expects {model.input_size}x{model.input_size}'
        )


def make_batch(samples, model, rng=None, augment_config=None):
    """Stack samples (located first) into model inputs and rasterized location targets."""
    if rng is not None:
        samples = [augment(s, rng, augment_config) for s in samples]
    located = [s for s in samples if s.has_location]
    ordered = located + [s for s in samples if not s.has_location]
    size = model.input_size
    targets = np.stack(
        [rasterize_location(s.location, size, model.mask_size) for s in located]
    ) if located else np.zeros((0, model.mask_size, model.mask_size))
    return Batch(
        images=np.stack([s.image for s in ordered])[:, None].astype(model.dtype),
        labels=np.array([s.class_label for s in ordered], dtype=int),
        targets=targets[:, None].astype(model.dtype),
        n_located=len(located),
    )


class CyclingStream:
    """Endless seeded reshuffles of `indices`; a draw may span two shuffles."""

    def __init__(self, indices, rng):
        self.indices = list(indices)
        self.rng = rng
        self._order = []

    def __bool__(self):
        return bool(self.indices)

    def draw(self, count):
        drawn = []
        while self.indices and len(drawn) < count:
            if not self._order:
                self._order = list(self.rng.permutation(self.indices))
            drawn.append(int(self._order.pop(0)))
        return drawn


# --------------------------------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------------------------------
def validation_scores(model, dataset, threshold=0.5):
    """`(accuracy, mean JSI over located samples)`, NaN where undefined."""
    if not len(dataset):
        return math.nan, math.nan
    prediction = model.predict(dataset.images())
    accuracy = float(np.mean(prediction.labels == dataset.labels))
    located = dataset.located_indices()
    if prediction.masks is None or not located:
        return accuracy, math.nan
    size = dataset.image_size
    binary = binarize_mask(prediction.masks[located], size, threshold)
    scores = [jsi(binary[i], dataset[index].location, shape=(size, size)).value for i, index in enumerate(located)]
    return accuracy, float(np.mean(scores))


# --------------------------------------------------------------------------------------------------
# Stage 1
# --------------------------------------------------------------------------------------------------
@dataclass
class StageOneResult:
    history: pd.DataFrame
    optimizer: OptimizerState


def train_stage1(model, dataset, config=None, augment_config=None, on_epoch=None):
    """Pre-train extractor and branch on the location-labeled samples of `dataset`."""
    config = config or TrainConfig()
    config.validate()
    if model.lanet is None:
        raise UsageError('stage 1 needs the lesion-aware branch (use_lanet is off)')
    located = dataset.subset(dataset.located_indices())
    if not len(located):
        raise UsageError('stage 1 needs at least one location-labeled sample')
    check_image_size(model, located)

    params = _trainable(model, [n for n, _ in model.named_parameters() if not n.startswith('head.')])
    state = OptimizerState()
    rng = seeded_rng(config.seed, 'stage1')
    jitter = augment_config or AugmentConfig()
    rows = []
    model.train()
    for epoch in range(1, config.stage1_epochs + 1):
        order = rng.permutation(len(located))
        losses = []
        for start in range(0, len(order), config.batch_labeled):
            batch = make_batch(
                [located[int(i)] for i in order[start:start + config.batch_labeled]],
                model, rng if config.augment else None, jitter,
            )
            output = model(batch.images, classify=False)
            loss = localization_loss(output.mask, batch.targets)
            _optimize(loss, params, state, config.lr)
            losses.append(loss.item())
        row = {'epoch': epoch, 'L_loc': float(np.mean(losses))}
        rows.append(row)
        log.info('stage 1 epoch %d/%d: L_loc=%.4f', epoch, config.stage1_epochs, row['L_loc'])
        if on_epoch is not None:
            on_epoch(row)
    return StageOneResult(pd.DataFrame(rows, columns=STAGE1_LOG_COLUMNS), state)


# --------------------------------------------------------------------------------------------------
# Stage 2
# --------------------------------------------------------------------------------------------------
@dataclass
class TrainResult:
    history: pd.DataFrame
    best_epoch: int
    best_state: dict
    final_state: dict
    optimizer: OptimizerState
    stage1_history: Optional[pd.DataFrame] = None

    @property
    def best_row(self):
        if self.best_epoch == 0:
            return {}
        return self.history.iloc[self.best_epoch - 1].to_dict()


def _mean_or_zero(values):
    return float(np.mean(values)) if values else 0.0


def _snapshot(model):
    return {name: value.copy() for name, value in model.state_dict().items()}


def _step_losses(model, batch, config, use_localization):
    output = model(batch.images)
    l_cls = classification_loss(output.probs, one_hot(batch.labels, model.config.num_classes))
    if model.lanet is None:
        return l_cls, l_cls, None, None
    if not use_localization:
        return l_cls * config.lam, l_cls, None, None

    n = batch.n_located
    mask = output.mask
    pred_labeled = mask[:n] if n else None
    pred_unlabeled = mask[n:] if n < mask.shape[0] else None
    labeled, pseudo = semi_localization_terms(pred_labeled, batch.targets, pred_unlabeled, config.tau)
    semi = _combine_terms(labeled, pseudo, config.alpha)
    return hybrid_loss(l_cls, semi, config.lam), l_cls, labeled, pseudo


def train_stage2(model, dataset, config=None, val_dataset=None, augment_config=None, on_epoch=None):
    """Semi-supervised training of all three networks; the model ends at its best epoch.

    Each step draws `batch_labeled` location-labeled and `batch_unlabeled` unlabeled samples from
    two independently cycling streams; when one stream is empty the other fills the whole batch.
    An epoch is `ceil(N / (m + m'))` steps. The best epoch is the one with the highest validation
    accuracy (earliest on ties), or the last epoch without a validation set.
    """
    config = config or TrainConfig()
    config.validate()
    if not len(dataset):
        raise UsageError('stage 2 needs a nonempty training set')
    check_image_size(model, dataset)
    jitter = augment_config or AugmentConfig()

    located_indices = dataset.located_indices()
    located_set = set(located_indices)
    use_localization = model.lanet is not None and bool(located_indices)
    if model.lanet is not None and not located_indices:
        log.warning('no location-labeled samples: stage 2 degenerates to classification (lam * L_cls)')

    rng = seeded_rng(config.seed, 'stage2')
    labeled_stream = CyclingStream(located_indices, seeded_rng(config.seed, 'stage2_labeled'))
    unlabeled_stream = CyclingStream(
        [i for i in range(len(dataset)) if i not in located_set],
        seeded_rng(config.seed, 'stage2_unlabeled'),
    )
    per_step = config.batch_labeled + config.batch_unlabeled
    steps = math.ceil(len(dataset) / per_step)

    params = _trainable(model)
    state = OptimizerState()
    rows = []
    best_epoch, best_accuracy, best_state = 0, -math.inf, _snapshot(model)
    for epoch in range(1, config.stage2_epochs + 1):
        model.train()
        sums = {'L_cls': [], 'L_loc_labeled': [], 'L_loc_pseudo': [], 'L_hyb': []}
        for _ in range(steps):
            if labeled_stream and unlabeled_stream:
                indices = labeled_stream.draw(config.batch_labeled) + unlabeled_stream.draw(config.batch_unlabeled)
            else:
                indices = (labeled_stream or unlabeled_stream).draw(per_step)
            batch = make_batch(
                [dataset[i] for i in indices], model, rng if config.augment else None, jitter
            )
            loss, l_cls, labeled, pseudo = _step_losses(model, batch, config, use_localization)
            _optimize(loss, params, state, config.lr)
            sums['L_cls'].append(l_cls.item())
            sums['L_hyb'].append(loss.item())
            if labeled is not None:
                sums['L_loc_labeled'].append(labeled.item())
            if pseudo is not None:
                sums['L_loc_pseudo'].append(pseudo.item())

        val_accuracy, val_jsi = validation_scores(model, val_dataset) if val_dataset is not None else (math.nan, math.nan)
        row = {'epoch': epoch, **{k: _mean_or_zero(v) for k, v in sums.items()},
               'val_accuracy': val_accuracy, 'val_JSI': val_jsi}
        rows.append(row)
        log.info(
            'stage 2 epoch %d/%d: L_cls=%.4f L_loc=%.4f L_pseudo=%.4f L_hyb=%.4f val_acc=%.4f val_JSI=%.4f',
            epoch, config.stage2_epochs, row['L_cls'], row['L_loc_labeled'], row['L_loc_pseudo'],
            row['L_hyb'], val_accuracy, val_jsi,
        )

        no_validation = math.isnan(val_accuracy)
        if no_validation or val_accuracy > best_accuracy:
            best_epoch, best_state = epoch, _snapshot(model)
            best_accuracy = -math.inf if no_validation else val_accuracy
        if on_epoch is not None:
            on_epoch(row)

    final_state = _snapshot(model)
    model.load_state_dict(best_state)
    model.eval()
    history = pd.DataFrame(rows, columns=EPOCH_LOG_COLUMNS)
    log.info('stage 2 done: best epoch %d of %d', best_epoch, config.stage2_epochs)
    return TrainResult(history, best_epoch, best_state, final_state, state)


def _tag_stage(on_epoch, stage):
    if on_epoch is None:
        return None
    return lambda row: on_epoch({'stage': stage, **row})


def train(model, dataset, config=None, val_dataset=None, augment_config=None, on_epoch=None):
    """Stage 1 (when the branch exists and epochs are configured) then stage 2.

    `on_epoch` sees every epoch's log row of both stages, with a `stage` key of 1 or 2.
    """
    config = config or TrainConfig()
    stage1 = None
    if model.lanet is not None and config.stage1_epochs > 0 and dataset.located_indices():
        stage1 = train_stage1(model, dataset, config, augment_config, _tag_stage(on_epoch, 1))
    result = train_stage2(
        model, dataset, config, val_dataset, augment_config, _tag_stage(on_epoch, 2)
    )
    result.stage1_history = stage1.history if stage1 is not None else None
    return result


def write_log(history, path):
    history.to_csv(path, index=False, lineterminator='\n', encoding='utf-8')
    return path
