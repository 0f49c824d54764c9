"""Classification and localization metrics, and their aggregation over repeated runs.

The positive class for sensitivity and specificity is malignant (label 1):

    >>> m = classification_metrics(ConfusionCounts(tp=8, fp=2, tn=7, fn=3))
    >>> round(m.precision, 4), round(m.sensitivity, 4), round(m.specificity, 4), round(m.f1, 4)
    (0.8, 0.7273, 0.7778, 0.7619)

Localization is scored with the Jaccard similarity index (intersection over union):

    >>> from lesionaware.data import BoxLocation
    >>> round(jsi(BoxLocation(0, 0, 10, 10), BoxLocation(5, 5, 15, 15)).value, 4)
    0.1429
"""
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np
import pandas as pd
from scipy import ndimage, stats

from .data import MALIGNANT, BoxLocation, MaskLocation
from .errors import ConfigError, DimensionError
from .tensor import Tensor, no_grad, resize_bilinear


__all__ = [
    'ClassificationMetrics',
    'ConfusionCounts',
    'EvalReport',
    'JaccardScore',
    'binarize_mask',
    'classification_metrics',
    'confidence_interval',
    'dice_from_jsi',
    'evaluate',
    'evaluate_run',
    'jsi',
    'mask_to_bbox',
]

log = logging.getLogger(__name__)

REPORT_METRICS = ['accuracy', 'precision', 'specificity', 'sensitivity', 'f1', 'jsi', 'dice']


# --------------------------------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------------------------------
@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError(f'confusion counts must be non-negative, got {self}')

    @classmethod
    def from_labels(cls, y_true, y_pred, positive=MALIGNANT):
        y_true = np.asarray(y_true) == positive
        y_pred = np.asarray(y_pred) == positive
        return cls(
            tp=int(np.sum(y_true & y_pred)),
            fp=int(np.sum(~y_true & y_pred)),
            tn=int(np.sum(~y_true & ~y_pred)),
            fn=int(np.sum(y_true & ~y_pred)),
        )

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class ClassificationMetrics:
    precision: float
    specificity: float
    sensitivity: float
    f1: float
    accuracy: float
    # names of metrics whose denominator was zero (reported as 0)
    degenerate: tuple = ()

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != 'degenerate'}


def _ratio(numerator, denominator, name, degenerate):
    if denominator == 0:
        degenerate.append(name)
        return 0.0
    return numerator / denominator


def classification_metrics(counts):
    degenerate = []
    precision = _ratio(counts.tp, counts.tp + counts.fp, 'precision', degenerate)
    sensitivity = _ratio(counts.tp, counts.tp + counts.fn, 'sensitivity', degenerate)
    specificity = _ratio(counts.tn, counts.tn + counts.fp, 'specificity', degenerate)
    f1 = _ratio(2 * precision * sensitivity, precision + sensitivity, 'f1', degenerate)
    accuracy = _ratio(counts.tp + counts.tn, counts.total, 'accuracy', degenerate)
    return ClassificationMetrics(precision, specificity, sensitivity, f1, accuracy, tuple(degenerate))


# --------------------------------------------------------------------------------------------------
# Localization
# --------------------------------------------------------------------------------------------------
def binarize_mask(mask, out_size, threshold=0.5):
    """Upsample `[S, S]` (or `[N, S, S]`) lesion probabilities to `out_size` and threshold them."""
    if not 0.0 < threshold < 1.0:
        raise ConfigError(f'threshold must lie in (0, 1), got {threshold}')
    mask = np.asarray(mask, dtype=np.float64)
    single = mask.ndim == 2
    if single:
        mask = mask[None]
    if mask.ndim != 3:
        raise DimensionError(f'binarize_mask: expects [S, S] or [N, S, S], got {mask.shape}')
    with no_grad():
        upsampled = resize_bilinear(Tensor(mask[:, None]), out_size, out_size).data[:, 0]
    binary = upsampled >= threshold
    return binary[0] if single else binary


def mask_to_bbox(binary_mask, largest_component=False):
    """Smallest box holding every positive pixel, or only the largest 8-connected component."""
    region = np.asarray(binary_mask, dtype=bool)
    if largest_component and region.any():
        labels, count = ndimage.label(region, structure=np.ones((3, 3), dtype=int))
        if count > 1:
            sizes = np.bincount(labels.ravel())[1:]
            region = labels == (int(np.argmax(sizes)) + 1)
    rows, cols = np.nonzero(region)
    if rows.size == 0:
        return None
    return BoxLocation(int(cols.min()), int(rows.min()), int(cols.max()) + 1, int(rows.max()) + 1)


@dataclass(frozen=True)
class JaccardScore:
    value: float
    # both regions empty: counted as agreement
    degenerate: bool = False

    def __float__(self):
        return self.value


def _as_region(location, shape):
    if location is None:
        return np.zeros(shape, dtype=bool)
    if isinstance(location, (BoxLocation, MaskLocation)):
        return location.to_mask(*shape)
    region = np.asarray(location, dtype=bool)
    if region.shape != tuple(shape):
        raise DimensionError(f'jsi: region shapes differ, {region.shape} vs {tuple(shape)}')
    return region


def _region_shape(*locations):
    for location in locations:
        if isinstance(location, MaskLocation):
            return location.mask.shape
        if isinstance(location, np.ndarray):
            return location.shape
    return None


def _box_jsi(a, b):
    width = max(0, min(a.x1, b.x1) - max(a.x0, b.x0))
    height = max(0, min(a.y1, b.y1) - max(a.y0, b.y0))
    intersection = width * height
    return JaccardScore(intersection / (a.area + b.area - intersection))


def jsi(a, b, shape=None):
    """`|A & B| / |A | B|` for masks, boxes or `None` (empty); both empty scores 1, flagged."""
    if isinstance(a, BoxLocation) and isinstance(b, BoxLocation):
        return _box_jsi(a, b)
    shape = shape or _region_shape(a, b)
    if shape is None:
        if a is None and b is None:
            return JaccardScore(1.0, degenerate=True)
        # one box, one empty
        return JaccardScore(0.0)
    region_a, region_b = _as_region(a, shape), _as_region(b, shape)
    union = np.count_nonzero(region_a | region_b)
    if union == 0:
        return JaccardScore(1.0, degenerate=True)
    return JaccardScore(np.count_nonzero(region_a & region_b) / union)


def dice_from_jsi(value):
    return 2.0 * value / (1.0 + value)


# --------------------------------------------------------------------------------------------------
# Evaluation and aggregation
# --------------------------------------------------------------------------------------------------
def confidence_interval(values, level=0.95):
    """Mean and Student-t half-width of the interval; half-width 0 for a single value.

    >>> mean, half = confidence_interval([0.4, 0.5, 0.6])
    >>> round(mean, 6), round(half, 3)
    (0.5, 0.248)
    """
    values = np.asarray([v for v in values if not math.isnan(v)], dtype=np.float64)
    if values.size == 0:
        return math.nan, math.nan
    mean = float(values.mean())
    if values.size == 1:
        return mean, 0.0
    t_value = stats.t.ppf(0.5 + level / 2.0, values.size - 1)
    return mean, float(t_value * values.std(ddof=1) / math.sqrt(values.size))


@dataclass
class EvalRun:
    metrics: ClassificationMetrics
    jsi: float
    per_sample: pd.DataFrame

    def as_dict(self):
        dice = math.nan if math.isnan(self.jsi) else dice_from_jsi(self.jsi)
        return {**self.metrics.as_dict(), 'jsi': self.jsi, 'dice': dice}


def evaluate_run(model, dataset, as_bbox=False, threshold=0.5, largest_component=False, batch_size=16):
    """Score one trained model: argmax class predictions, thresholded upsampled lesion masks."""
    prediction = model.predict(dataset.images(), batch_size=batch_size)
    labels = dataset.labels
    predicted = prediction.labels
    counts = ConfusionCounts.from_labels(labels, predicted)
    metrics = classification_metrics(counts)

    size = dataset.image_size if len(dataset) else 0
    binary = None
    if prediction.masks is not None and len(dataset):
        binary = binarize_mask(prediction.masks, size, threshold)

    rows, scores = [], []
    for index, sample in enumerate(dataset):
        score = math.nan
        if binary is not None and sample.has_location:
            predicted_region = binary[index]
            if as_bbox and isinstance(sample.location, BoxLocation):
                predicted_region = mask_to_bbox(predicted_region, largest_component)
            score = jsi(predicted_region, sample.location, shape=(size, size)).value
            scores.append(score)
        rows.append({
            'index': index,
            'class': int(labels[index]),
            'predicted': int(predicted[index]),
            'p_positive': float(prediction.probs[index, MALIGNANT]),
            'jsi': score,
        })

    if binary is None:
        log.info('model has no localization branch; JSI omitted')
    elif not scores:
        log.warning('no location-labeled samples to score; JSI omitted')
    mean_jsi = float(np.mean(scores)) if scores else math.nan
    per_sample = pd.DataFrame(rows, columns=['index', 'class', 'predicted', 'p_positive', 'jsi'])
    return EvalRun(metrics, mean_jsi, per_sample)


@dataclass
class EvalReport:
    runs: list = field(default_factory=list)
    labels: Optional[list] = None

    @property
    def n_runs(self):
        return len(self.runs)

    def summary(self):
        """`{metric: (mean, half_width)}` across runs."""
        values = [run.as_dict() for run in self.runs]
        return {name: confidence_interval([v[name] for v in values]) for name in REPORT_METRICS}

    def to_frame(self):
        run_labels = self.labels or [f'run_{i + 1}' for i in range(self.n_runs)]
        values = [run.as_dict() for run in self.runs]
        rows = []
        for name, (mean, half_width) in self.summary().items():
            row = {'metric': name, 'mean': mean, 'ci95': half_width, 'n_runs': self.n_runs}
            row.update({label: v[name] for label, v in zip(run_labels, values)})
            rows.append(row)
        return pd.DataFrame(rows)

    def per_sample_frame(self):
        run_labels = self.labels or [f'run_{i + 1}' for i in range(self.n_runs)]
        frames = [run.per_sample.assign(run=label) for label, run in zip(run_labels, self.runs)]
        if not frames:
            return pd.DataFrame(columns=['run', 'index', 'class', 'predicted', 'p_positive', 'jsi'])
        frame = pd.concat(frames, ignore_index=True)
        return frame[['run'] + [c for c in frame.columns if c != 'run']]

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator='\n', encoding='utf-8')
        return path

    def to_table(self):
        lines = [f'{"metric":<12} {"mean":>8}   {"95% CI":>8}   (n={self.n_runs})']
        for name, (mean, half_width) in self.summary().items():
            if math.isnan(mean):
                lines.append(f'{name:<12} {"n/a":>8}')
            else:
                lines.append(f'{name:<12} {mean:>8.4f} ± {half_width:>8.4f}')
        return '\n'.join(lines)


def evaluate(models, dataset, as_bbox=False, threshold=0.5, largest_component=False, labels=None):
    """Evaluate one model or several (repeats) on the same dataset and aggregate."""
    if not isinstance(models, (list, tuple)):
        models = [models]
    runs = [
        evaluate_run(model, dataset, as_bbox, threshold, largest_component) for model in models
    ]
    return EvalReport(runs, labels)
