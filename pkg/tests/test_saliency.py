import numpy as np
import pandas as pd
import pytest
from PIL import Image

from lesionaware.data import BoxLocation, MaskLocation
from lesionaware.errors import DimensionError, UsageError
from lesionaware.model import build_model
from lesionaware.saliency import Heatmap, grad_cam, heatmap_from_gradients, overlap_stats, run_saliency
from lesionaware.tensor import no_grad
from ._test_utils import bilinear_oracle


@pytest.fixture
def vanilla_model(tiny_model_config):
    tiny_model_config.use_lanet = False
    return build_model(tiny_model_config, seed=0)


def _top_activation(model, image):
    model.eval()
    with no_grad():
        return model.fex(model.as_input(image[None])).top.data[0]


def test_grad_cam_matches_pooling_oracle(vanilla_model, tiny_dataset):
    image = tiny_dataset[0].image
    activation = _top_activation(vanilla_model, image)
    channels, height, width = activation.shape
    weight = vanilla_model.head.fc.weight.data

    for class_index in (0, 1):
        # the logit is fc(mean(A)), so each channel weight is W[c, k] / (h * w)
        cam = np.zeros((height, width))
        for k in range(channels):
            cam += weight[class_index, k] / (height * width) * activation[k]
        cam = bilinear_oracle(np.maximum(cam, 0.0), 16)
        expected = (cam - cam.min()) / (cam.max() - cam.min())

        heatmap = grad_cam(vanilla_model, image, class_index)
        assert heatmap.class_index == class_index
        assert heatmap.source_layer == 'fex.stages.1'
        np.testing.assert_allclose(heatmap.values, expected, atol=1e-9)


def test_grad_cam_ignores_logit_scale(vanilla_model, tiny_dataset):
    image = tiny_dataset[1].image
    before = grad_cam(vanilla_model, image, 1)
    vanilla_model.head.fc.weight.data *= 4.0
    vanilla_model.head.fc.bias.data += 3.0
    after = grad_cam(vanilla_model, image, 1)
    assert np.array_equal(before.values, after.values)


def test_zero_gradient_gives_flagged_zero_map(vanilla_model, tiny_dataset, caplog):
    vanilla_model.head.fc.weight.data[...] = 0.0
    heatmap = grad_cam(vanilla_model, tiny_dataset[0].image, 0)
    assert heatmap.degenerate
    assert not heatmap.values.any()
    assert 'flat' in caplog.text


def test_grad_cam_defaults_to_predicted_class(tiny_model, tiny_dataset):
    image = tiny_dataset[2].image
    predicted = int(tiny_model.predict(image[None]).labels[0])
    heatmap = grad_cam(tiny_model, image)
    assert heatmap.class_index == predicted
    assert heatmap.values.shape == (16, 16)
    assert heatmap.values.min() >= 0.0 and heatmap.values.max() <= 1.0


def test_grad_cam_leaves_model_clean(tiny_model, tiny_dataset):
    tiny_model.train()
    grad_cam(tiny_model, tiny_dataset[0].image, 1)
    assert tiny_model.training
    assert all(not p.grad.any() for p in tiny_model.parameters())


def test_grad_cam_rejects_bad_inputs(tiny_model, tiny_dataset):
    with pytest.raises(UsageError, match='class index 2'):
        grad_cam(tiny_model, tiny_dataset[0].image, 2)
    with pytest.raises(DimensionError):
        grad_cam(tiny_model, np.zeros((1, 16, 16)))
    with pytest.raises(DimensionError):
        heatmap_from_gradients(np.zeros((2, 3, 3)), np.zeros((2, 3, 4)), 8)


def test_overlap_stats():
    values = np.zeros((8, 8))
    values[2, 2] = 1.0
    values[6, 6] = 0.5
    heatmap = Heatmap(values, 0, 'fex.stages.1')
    peak_inside, ratio = overlap_stats(heatmap, BoxLocation(0, 0, 4, 4))
    assert peak_inside is True
    assert ratio == pytest.approx(1 / 1.5)
    mask = np.zeros((8, 8), dtype=bool)
    mask[6, 6] = True
    assert overlap_stats(heatmap, MaskLocation(mask)) == (False, pytest.approx(0.5 / 1.5))
    assert overlap_stats(heatmap, None) == (None, None)


def test_run_saliency_writes_outputs(tiny_model, tiny_dataset, tmp_path):
    subset = tiny_dataset.subset([0, 1, 2])
    path = run_saliency(tiny_model, subset, tmp_path)
    frame = pd.read_csv(path)
    assert frame.columns.tolist() == [
        'index', 'class', 'target_class', 'degenerate', 'peak_inside', 'inside_ratio',
    ]
    assert frame['index'].tolist() == [0, 1, 2]
    for index in range(3):
        with Image.open(tmp_path / 'heatmaps' / f'{index:05d}.png') as heatmap:
            assert heatmap.size == (16, 16)
            assert heatmap.mode == 'L'
        with Image.open(tmp_path / 'overlays' / f'{index:05d}.png') as overlay:
            assert overlay.mode == 'RGB'
