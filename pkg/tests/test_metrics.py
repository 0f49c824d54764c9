import math

import numpy as np
import pytest

from lesionaware.data import BoxLocation, Dataset, MaskLocation, Sample, rasterize_location
from lesionaware.errors import ConfigError, DimensionError
from lesionaware.metrics import (
    REPORT_METRICS,
    ConfusionCounts,
    binarize_mask,
    classification_metrics,
    confidence_interval,
    dice_from_jsi,
    evaluate,
    evaluate_run,
    jsi,
    mask_to_bbox,
)
from lesionaware.model import Prediction
from ._test_utils import assert_deep_pattern_match, bilinear_oracle


class FixedPredictions:
    """Stands in for a trained model: `predict` returns canned outputs."""

    def __init__(self, probs, masks=None):
        self.prediction = Prediction(np.asarray(probs, dtype=float), masks)

    def predict(self, images, batch_size=16):
        assert len(images) == len(self.prediction.probs)
        return self.prediction


# --------------------------------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------------------------------
def test_confusion_counts_from_labels():
    counts = ConfusionCounts.from_labels([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert counts == ConfusionCounts(tp=2, fp=1, tn=1, fn=1)
    assert counts.total == 5


@pytest.mark.parametrize('counts,expected', [
    (
        ConfusionCounts(tp=8, fp=2, tn=7, fn=3),
        {'precision': 0.8, 'sensitivity': 8 / 11, 'specificity': 7 / 9, 'f1': 0.8 * (8 / 11) * 2 / (0.8 + 8 / 11), 'accuracy': 0.75},
    ),
    (
        ConfusionCounts(tp=5, fp=0, tn=5, fn=0),
        {'precision': 1.0, 'sensitivity': 1.0, 'specificity': 1.0, 'f1': 1.0, 'accuracy': 1.0},
    ),
    (
        ConfusionCounts(tp=0, fp=4, tn=0, fn=6),
        {'precision': 0.0, 'sensitivity': 0.0, 'specificity': 0.0, 'f1': 0.0, 'accuracy': 0.0},
    ),
])
def test_classification_metrics(counts, expected):
    assert_deep_pattern_match(classification_metrics(counts).as_dict(), expected, tol=1e-12)


def test_zero_denominators_are_flagged():
    metrics = classification_metrics(ConfusionCounts(tn=5))
    assert metrics.precision == metrics.sensitivity == metrics.f1 == 0.0
    assert metrics.specificity == 1.0
    assert metrics.degenerate == ('precision', 'sensitivity', 'f1')


def test_confusion_counts_reject_negatives():
    with pytest.raises(ValueError):
        ConfusionCounts(tp=-1)


# --------------------------------------------------------------------------------------------------
# Localization
# --------------------------------------------------------------------------------------------------
@pytest.mark.parametrize('value,expected', [(0.6, True), (0.4, False)])
def test_binarize_flat_mask(value, expected):
    binary = binarize_mask(np.full((4, 4), value), 16)
    assert binary.shape == (16, 16)
    assert binary.dtype == bool
    assert (binary == expected).all()


def test_binarize_checkerboard_matches_bilinear_oracle():
    mask = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = bilinear_oracle(mask, 4) >= 0.5
    assert np.array_equal(binarize_mask(mask, 4), expected)
    assert np.array_equal(binarize_mask(np.stack([mask, mask]), 4), np.stack([expected, expected]))


def test_binarize_doubles_a_checkerboard():
    mask = np.where(np.indices((4, 4)).sum(axis=0) % 2 == 0, 0.9, 0.1)
    assert np.array_equal(binarize_mask(mask, 8), bilinear_oracle(mask, 8) >= 0.5)


def test_binarize_rejects_bad_inputs():
    with pytest.raises(ConfigError, match='threshold'):
        binarize_mask(np.zeros((2, 2)), 4, threshold=1.0)
    with pytest.raises(DimensionError):
        binarize_mask(np.zeros((1, 1, 2, 2)), 4)


def test_mask_to_bbox():
    region = np.zeros((8, 8), dtype=bool)
    assert mask_to_bbox(region) is None
    region[3, 2] = True
    assert mask_to_bbox(region) == BoxLocation(2, 3, 3, 4)
    region[5:8, 5:8] = True
    assert mask_to_bbox(region) == BoxLocation(2, 3, 8, 8)
    assert mask_to_bbox(region, largest_component=True) == BoxLocation(5, 5, 8, 8)


def test_mask_to_bbox_inverts_rasterization():
    rng = np.random.default_rng(7)
    for _ in range(50):
        x0, y0 = rng.integers(0, 15, size=2)
        x1, y1 = rng.integers(x0 + 1, 17), rng.integers(y0 + 1, 17)
        box = BoxLocation(int(x0), int(y0), int(x1), int(y1))
        assert mask_to_bbox(rasterize_location(box, 16, 16)) == box


def test_mask_to_bbox_scan_example():
    region = np.zeros((12, 12), dtype=bool)
    region[2, 3] = region[7, 9] = True
    assert mask_to_bbox(region) == BoxLocation(3, 2, 10, 8)


def test_diagonal_neighbours_are_one_component():
    region = np.eye(4, dtype=bool)
    region[0, 3] = True
    assert mask_to_bbox(region, largest_component=True) == BoxLocation(0, 0, 4, 4)


@pytest.mark.parametrize('a,b,expected', [
    (BoxLocation(0, 0, 10, 10), BoxLocation(5, 5, 15, 15), 1 / 7),
    (BoxLocation(0, 0, 10, 10), BoxLocation(0, 0, 10, 10), 1.0),
    (BoxLocation(0, 0, 2, 2), BoxLocation(5, 5, 6, 6), 0.0),
    (BoxLocation(0, 0, 4, 4), BoxLocation(1, 1, 3, 3), 0.25),
])
def test_box_jsi(a, b, expected):
    assert jsi(a, b).value == pytest.approx(expected)
    # the pixel-count path agrees with the analytic one
    assert jsi(a.to_mask(20, 20), b).value == pytest.approx(expected)


def test_jsi_is_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        a = rng.random((8, 8)) < 0.4
        x0, y0 = rng.integers(0, 7, size=2)
        b = BoxLocation(int(x0), int(y0), int(rng.integers(x0 + 1, 9)), int(rng.integers(y0 + 1, 9)))
        forward, backward = jsi(a, b).value, jsi(b, a).value
        assert forward == backward
        assert 0.0 <= forward <= 1.0


def test_jsi_empty_regions():
    empty = np.zeros((4, 4), dtype=bool)
    both = jsi(empty, MaskLocation(empty))
    assert (both.value, both.degenerate) == (1.0, True)
    assert jsi(None, BoxLocation(0, 0, 1, 1)).value == 0.0
    assert jsi(None, None).degenerate
    assert jsi(empty, BoxLocation(0, 0, 2, 2)).value == 0.0


def test_jsi_shape_mismatch():
    with pytest.raises(DimensionError):
        jsi(np.zeros((4, 4), dtype=bool), np.zeros((5, 5), dtype=bool))


def test_dice_from_jsi():
    assert dice_from_jsi(1 / 3) == pytest.approx(0.5)
    assert dice_from_jsi(0.0) == 0.0


# --------------------------------------------------------------------------------------------------
# Aggregation
# --------------------------------------------------------------------------------------------------
def test_confidence_interval():
    assert confidence_interval([0.7]) == (0.7, 0.0)
    mean, half = confidence_interval([0.4, math.nan, 0.6])
    assert mean == pytest.approx(0.5)
    # t(0.975, 1) = 12.706
    assert half == pytest.approx(12.7062 * math.sqrt(0.02) / math.sqrt(2), rel=1e-4)
    assert all(math.isnan(v) for v in confidence_interval([]))


def _located_dataset():
    samples = [
        Sample(np.zeros((8, 8)), 1, BoxLocation(0, 0, 4, 4)),
        Sample(np.zeros((8, 8)), 0, BoxLocation(4, 4, 8, 8)),
        Sample(np.zeros((8, 8)), 1, None),
    ]
    return Dataset(samples)


def test_evaluate_run_with_fixed_predictions():
    # mask 2x2 -> 8x8: top-left block on, everything else off
    masks = np.zeros((3, 2, 2))
    masks[:, 0, 0] = 1.0
    model = FixedPredictions([[0.2, 0.8], [0.3, 0.7], [0.9, 0.1]], masks)
    run = evaluate_run(model, _located_dataset())

    assert run.metrics.as_dict()['accuracy'] == pytest.approx(1 / 3)
    assert run.per_sample.columns.tolist() == ['index', 'class', 'predicted', 'p_positive', 'jsi']
    assert run.per_sample['predicted'].tolist() == [1, 1, 0]
    region = binarize_mask(masks[0], 8)
    first = jsi(region, BoxLocation(0, 0, 4, 4)).value
    second = jsi(region, BoxLocation(4, 4, 8, 8)).value
    assert run.per_sample['jsi'].iloc[:2].tolist() == pytest.approx([first, second])
    assert math.isnan(run.per_sample['jsi'].iloc[2])
    assert run.jsi == pytest.approx((first + second) / 2)
    assert run.as_dict()['dice'] == pytest.approx(dice_from_jsi(run.jsi))


def test_evaluate_run_as_bbox():
    masks = np.zeros((3, 8, 8))
    masks[:, 1:3, 1:3] = 1.0
    masks[:, 5, 6] = 1.0
    model = FixedPredictions([[0.5, 0.5]] * 3, masks)
    loose = evaluate_run(model, _located_dataset(), as_bbox=True)
    tight = evaluate_run(model, _located_dataset(), as_bbox=True, largest_component=True)
    # predicted boxes (1, 1, 7, 6) and (1, 1, 3, 3) against (0, 0, 4, 4)
    assert loose.per_sample['jsi'].iloc[0] == pytest.approx(9 / 37)
    assert tight.per_sample['jsi'].iloc[0] == pytest.approx(4 / 16)


def test_evaluate_without_branch():
    model = FixedPredictions([[0.2, 0.8], [0.3, 0.7], [0.9, 0.1]])
    report = evaluate([model, model], _located_dataset())
    summary = report.summary()
    assert math.isnan(summary['jsi'][0])
    assert summary['accuracy'] == (pytest.approx(1 / 3), 0.0)
    assert 'n/a' in report.to_table()


def test_report_frames(tiny_model, tiny_dataset, tmp_path):
    report = evaluate([tiny_model, tiny_model], tiny_dataset, labels=['a', 'b'])
    frame = report.to_frame()
    assert frame['metric'].tolist() == REPORT_METRICS
    assert frame.columns.tolist() == ['metric', 'mean', 'ci95', 'n_runs', 'a', 'b']
    # identical runs have no spread
    assert (frame['ci95'] == 0.0).all()
    per_sample = report.per_sample_frame()
    assert len(per_sample) == 2 * len(tiny_dataset)
    assert per_sample.columns[0] == 'run'

    path = report.to_csv(tmp_path / 'metrics.csv')
    assert path.read_text().splitlines()[0] == 'metric,mean,ci95,n_runs,a,b'
    assert report.to_table().startswith('metric')
