"""Grad-CAM heatmaps over the extractor's last feature map.

The class score is the pre-softmax logit. Channel weights are the spatial means of its gradient
with respect to the activation, the map is `relu(sum_k w_k A_k)`, upsampled bilinearly to the
input size and min-max normalized.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw

from .data import BoxLocation, write_png
from .errors import DimensionError, UsageError
from .metrics import mask_to_bbox
from .tensor import Tensor, backward, resize_bilinear


__all__ = [
    'Heatmap',
    'grad_cam',
    'heatmap_from_gradients',
    'overlap_stats',
    'run_saliency',
    'save_heatmap',
    'save_overlay',
]

log = logging.getLogger(__name__)

SALIENCY_COLUMNS = ['index', 'class', 'target_class', 'degenerate', 'peak_inside', 'inside_ratio']


@dataclass
class Heatmap:
    values: np.ndarray
    class_index: int
    source_layer: str
    # the unnormalized map was flat (usually all zero)
    degenerate: bool = False

    @property
    def peak(self):
        """`(row, col)` of the maximum."""
        return np.unravel_index(int(np.argmax(self.values)), self.values.shape)


def heatmap_from_gradients(activation, gradient, out_size):
    """Normalized `[out_size, out_size]` map from one image's `[C, h, w]` activation and gradient.

    Returns `(values, degenerate)`.
    """
    activation = np.asarray(activation, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    if activation.ndim != 3 or activation.shape != gradient.shape:
        raise DimensionError(
            f'grad_cam: activation {activation.shape} and gradient {gradient.shape} must be [C, h, w]'
        )
    weights = gradient.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, activation, axes=1), 0.0)
    cam = resize_bilinear(Tensor(cam[None, None]), out_size, out_size).data[0, 0]
    low, high = cam.min(), cam.max()
    if high <= low:
        return np.zeros((out_size, out_size)), True
    return (cam - low) / (high - low), False


def grad_cam(model, image, class_index=None):
    """Heatmap for one `[H, W]` image; `class_index` defaults to the predicted class."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise DimensionError(f'grad_cam: expects one [H, W] image, got {image.shape}')
    was_training = model.training
    model.eval()
    try:
        pyramid = model.fex(model.as_input(image[None]))
        activation = pyramid.top.retain_grad()
        output = model.forward_from_pyramid(pyramid)
        if class_index is None:
            class_index = int(output.probs.data[0].argmax())
        if not 0 <= class_index < model.config.num_classes:
            raise UsageError(f'class index {class_index} outside [0, {model.config.num_classes})')
        selector = np.zeros(output.logits.shape, dtype=output.logits.dtype)
        selector[0, class_index] = 1.0
        backward((output.logits * selector).sum())
        gradient = activation.grad if activation.grad is not None else np.zeros_like(activation.data)
        values, degenerate = heatmap_from_gradients(activation.data[0], gradient[0], image.shape[0])
    finally:
        model.zero_grad()
        model.train(was_training)

    if degenerate:
        log.warning('grad-cam map for class %d is flat; returning a zero heatmap', class_index)
    layer = f'fex.stages.{len(model.fex.stages) - 1}'
    return Heatmap(values, class_index, layer, degenerate)


# --------------------------------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------------------------------
def _location_box(location, shape):
    if location is None:
        return None
    if isinstance(location, BoxLocation):
        return location
    return mask_to_bbox(location.to_mask(*shape))


def overlap_stats(heatmap, location):
    """`(peak_inside, inside_ratio)` of the heatmap against a lesion location, `None`s without one."""
    if location is None:
        return None, None
    region = location.to_mask(*heatmap.values.shape)
    peak_inside = bool(region[heatmap.peak]) and not heatmap.degenerate
    total = heatmap.values.sum()
    inside_ratio = float(heatmap.values[region].sum() / total) if total > 0 else 0.0
    return peak_inside, inside_ratio


def save_heatmap(heatmap, path):
    write_png(path, heatmap.values)
    return path


def save_overlay(image, heatmap, location, path, opacity=0.5):
    """Grayscale image with the heatmap blended into the red channel and the lesion box in green."""
    gray = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    rgb = np.repeat(gray[..., None], 3, axis=2)
    rgb[..., 0] = (1.0 - opacity) * gray + opacity * heatmap.values
    canvas = Image.fromarray(np.round(rgb * 255.0).astype(np.uint8))
    box = _location_box(location, gray.shape)
    if box is not None:
        ImageDraw.Draw(canvas).rectangle(
            [box.x0, box.y0, box.x1 - 1, box.y1 - 1], outline=(0, 255, 0)
        )
    canvas.save(path, format='PNG')
    return path


def run_saliency(model, dataset, out_dir):
    """Heatmap and overlay PNGs for every sample plus `saliency.csv` with GT overlap figures."""
    out = Path(out_dir)
    (out / 'heatmaps').mkdir(parents=True, exist_ok=True)
    (out / 'overlays').mkdir(exist_ok=True)
    rows = []
    for index, sample in enumerate(dataset):
        heatmap = grad_cam(model, sample.image)
        save_heatmap(heatmap, out / 'heatmaps' / f'{index:05d}.png')
        save_overlay(sample.image, heatmap, sample.location, out / 'overlays' / f'{index:05d}.png')
        peak_inside, inside_ratio = overlap_stats(heatmap, sample.location)
        rows.append({
            'index': index,
            'class': sample.class_label,
            'target_class': heatmap.class_index,
            'degenerate': heatmap.degenerate,
            'peak_inside': peak_inside,
            'inside_ratio': inside_ratio,
        })
    path = out / 'saliency.csv'
    pd.DataFrame(rows, columns=SALIENCY_COLUMNS).to_csv(
        path, index=False, lineterminator='\n', encoding='utf-8'
    )
    log.info('wrote %d heatmaps to %s', len(rows), out)
    return path
