import json
import math
import struct

import pandas as pd
import pytest

from lesionaware import training
from lesionaware.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint
from lesionaware.cli import build_parser, effective_config, main
from lesionaware.config import RunConfig
from lesionaware.errors import ConfigError

TINY_CONFIG = {
    'model': {
        'fex': {
            'n_stages': 2, 'stem_channels': 4, 'channels_per_stage': [4, 8], 'blocks_per_stage': [1, 1],
        },
        'lanet': {'reduction': 2, 'sam_kernel': 3},
        'dtype': 'float64',
    },
}

QUICK_FLAGS = [
    '--stage1-epochs', '1', '--epochs', '2', '--batch-labeled', '2', '--batch-unlabeled', '2',
    '--val-fraction', '0.25', '--no-augment', '--seed', '0',
]


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / 'tiny.json'
    path.write_text(json.dumps(TINY_CONFIG))
    return path


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / 'data'
    assert main(['gen-data', '--out', str(out), '--per-class', '5', '--size', '16', '--seed', '3']) == 0
    return out


@pytest.fixture
def trained_dir(tmp_path, data_dir, config_file):
    out = tmp_path / 'run'
    argv = ['train', '--data', str(data_dir), '--out', str(out), '--config', str(config_file)]
    assert main(argv + QUICK_FLAGS) == 0
    return out


# --------------------------------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------------------------------
def test_flags_override_file_override_defaults(config_file):
    args = build_parser().parse_args([
        'train', '--data', 'd', '--out', 'o', '--config', str(config_file), '--lambda', '0.3',
        '--no-sam', '--seed', '9',
    ])
    config = effective_config(args, image_size=16)
    assert config.train.lam == 0.3
    assert config.train.tau == 0.8
    assert config.train.seed == config.synth.seed == 9
    assert config.model.use_sam is False
    assert config.model.use_cam is True
    assert config.model.fex.channels_per_stage == [4, 8]
    assert config.model.fex.input_size == 16


def test_image_size_flag_beats_dataset_size():
    args = build_parser().parse_args(['train', '--data', 'd', '--out', 'o', '--image-size', '32'])
    assert effective_config(args, image_size=16).model.fex.input_size == 32


def test_preset_sets_extractor_topology():
    args = build_parser().parse_args(['train', '--data', 'd', '--out', 'o', '--preset', 'resnet18'])
    fex = effective_config(args, image_size=256).model.fex
    assert fex.channels_per_stage == [64, 128, 256, 512]
    assert fex.input_size == 256


# --------------------------------------------------------------------------------------------------
# Errors
# --------------------------------------------------------------------------------------------------
def test_missing_required_flag_is_a_usage_error(capsys):
    assert main(['gen-data']) == 2
    assert capsys.readouterr().err.startswith('usage-error: ')


def test_unknown_command_is_a_usage_error(capsys):
    assert main(['fly']) == 2
    assert 'usage-error' in capsys.readouterr().err


def test_invalid_configuration(tmp_path, capsys):
    assert main(['gen-data', '--out', str(tmp_path / 'x'), '--per-class', '0']) == 1
    err = capsys.readouterr().err
    assert err.startswith('error: ConfigError: per_class must be >= 1')
    assert len(err.strip().splitlines()) == 1


def test_invalid_json_config(tmp_path, capsys):
    bad = tmp_path / 'bad.json'
    bad.write_text('{"train": ')
    assert main(['gen-data', '--out', str(tmp_path / 'x'), '--config', str(bad)]) == 1
    assert 'invalid JSON' in capsys.readouterr().err


@pytest.mark.parametrize('layer,match', [
    ({'train': {'lam': 'x'}}, "TrainConfig.lam must be a number, got 'x'"),
    ({'train': {'augment': 1}}, 'TrainConfig.augment must be a boolean'),
    ({'train': {'repeats': 2.5}}, 'TrainConfig.repeats must be an integer'),
    ({'model': {'fex': {'channels_per_stage': [4, 'x']}}}, 'FexConfig.channels_per_stage must be a list of integers'),
    ({'model': {'fex': {'in_channels': 3}}}, 'in_channels must be 1'),
    ({'synth': []}, 'RunConfig.synth must be an object'),
])
def test_config_values_are_type_checked(layer, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.from_layers(layer)


def test_numbers_are_coerced_to_field_types():
    config = RunConfig.from_layers({'train': {'lr': 1, 'keep_loc_ratio': 0}})
    assert isinstance(config.train.lr, float)
    assert config.train.keep_loc_ratio == 0.0


def test_mistyped_config_file(tmp_path, data_dir, capsys):
    bad = tmp_path / 'bad.json'
    bad.write_text(json.dumps({'train': {'lam': 'x'}}))
    argv = ['train', '--data', str(data_dir), '--out', str(tmp_path / 'o'), '--config', str(bad)]
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ConfigError: TrainConfig.lam must be a number, got 'x'")
    assert len(err.strip().splitlines()) == 1


def test_malformed_checkpoint_file(tmp_path, data_dir, capsys):
    header = b'{}'
    checkpoint = tmp_path / 'broken.ckpt'
    checkpoint.write_bytes(MAGIC + struct.pack('<BI', FORMAT_VERSION, len(header)) + header)
    argv = ['eval', '--data', str(data_dir), '--checkpoint', str(checkpoint), '--out', str(tmp_path / 'e')]
    assert main(argv) == 1
    err = capsys.readouterr().err
    assert err.startswith('error: CheckpointError: ')
    assert 'broken.ckpt: corrupt checkpoint header' in err
    assert len(err.strip().splitlines()) == 1


def test_refuses_non_empty_output(data_dir, capsys):
    assert main(['gen-data', '--out', str(data_dir), '--per-class', '2', '--size', '16']) == 1
    assert 'error: UsageError' in capsys.readouterr().err
    assert main(['gen-data', '--out', str(data_dir), '--per-class', '2', '--size', '16', '--force']) == 0
    assert len(pd.read_csv(data_dir / 'manifest.csv')) == 4


def test_missing_dataset(tmp_path, capsys):
    assert main(['train', '--data', str(tmp_path / 'nowhere'), '--out', str(tmp_path / 'o')]) == 1
    assert 'error: DatasetLoadError' in capsys.readouterr().err


# --------------------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------------------
def test_gen_data_is_deterministic(tmp_path, data_dir, capsys):
    other = tmp_path / 'again'
    assert main(['gen-data', '--out', str(other), '--per-class', '5', '--size', '16', '--seed', '3']) == 0
    assert 'manifest.csv: 10 samples (5 benign, 5 malignant)' in capsys.readouterr().out
    for name in ['manifest.csv', 'images/00000.png', 'images/00009.png', 'masks/00004.png']:
        assert (data_dir / name).read_bytes() == (other / name).read_bytes()
    assert json.loads((other / 'config.json').read_text())['synth']['seed'] == 3


def test_train_writes_artifacts(trained_dir, capsys):
    for name in ['best.ckpt', 'final.ckpt', 'last.ckpt', 'stage1.csv', 'locations.csv', 'config.json']:
        assert (trained_dir / name).is_file(), name
    epochs = pd.read_csv(trained_dir / 'epochs.csv')
    assert epochs['epoch'].tolist() == [1, 2]
    config = json.loads((trained_dir / 'config.json').read_text())
    assert config['model']['fex']['input_size'] == 16
    assert config['train']['augment'] is False


def test_eval_aggregates_checkpoints(tmp_path, data_dir, trained_dir, capsys):
    out = tmp_path / 'eval'
    best = str(trained_dir / 'best.ckpt')
    argv = ['eval', '--data', str(data_dir), '--checkpoint', best, '--checkpoint', best, '--out', str(out)]
    assert main(argv) == 0
    assert 'accuracy' in capsys.readouterr().out
    metrics = pd.read_csv(out / 'metrics.csv')
    assert metrics['n_runs'].unique().tolist() == [2]
    assert (metrics['ci95'] == 0.0).all()
    assert len(pd.read_csv(out / 'per_sample.csv')) == 20
    assert (out / 'metrics.txt').read_text().startswith('metric')


def test_eval_rejects_other_image_size(tmp_path, trained_dir, capsys):
    data = tmp_path / 'big'
    assert main(['gen-data', '--out', str(data), '--per-class', '2', '--size', '32']) == 0
    argv = ['eval', '--data', str(data), '--checkpoint', str(trained_dir / 'best.ckpt'), '--out', str(tmp_path / 'e')]
    assert main(argv) == 1
    assert 'error: IncompatibleCheckpointError' in capsys.readouterr().err


def test_saliency_command(tmp_path, data_dir, trained_dir):
    out = tmp_path / 'cam'
    argv = ['saliency', '--data', str(data_dir), '--checkpoint', str(trained_dir / 'best.ckpt'), '--out', str(out)]
    assert main(argv) == 0
    assert len(pd.read_csv(out / 'saliency.csv')) == 10
    assert len(list((out / 'heatmaps').glob('*.png'))) == 10


def test_sweep_over_ratios(tmp_path, data_dir, config_file):
    out = tmp_path / 'sweep'
    argv = [
        'sweep', '--data', str(data_dir), '--out', str(out), '--config', str(config_file),
        '--ratios', '0,1', '--repeats', '1',
    ]
    assert main(argv + QUICK_FLAGS) == 0
    frame = pd.read_csv(out / 'sweep.csv')
    assert frame.columns[0] == 'ratio'
    assert frame['ratio'].tolist() == [0.0, 1.0]
    vanilla, full = frame.iloc[0], frame.iloc[1]
    # the vanilla baseline has no localization output
    assert math.isnan(vanilla['jsi'])
    assert not math.isnan(full['jsi'])
    assert (out / 'ratio_1.00' / 'repeat_1' / 'best.ckpt').is_file()


def test_ablate_runs_every_variant(tmp_path, data_dir, config_file):
    out = tmp_path / 'ablate'
    argv = [
        'ablate', '--data', str(data_dir), '--out', str(out), '--config', str(config_file),
        '--repeats', '1',
    ]
    assert main(argv + QUICK_FLAGS) == 0
    frame = pd.read_csv(out / 'ablation.csv')
    assert frame['variant'].tolist() == ['full', 'no_cam', 'no_sam', 'no_mam']


def test_train_is_reproducible(tmp_path, data_dir, config_file, trained_dir):
    again = tmp_path / 'again'
    argv = ['train', '--data', str(data_dir), '--out', str(again), '--config', str(config_file)]
    assert main(argv + QUICK_FLAGS) == 0
    for name in ['epochs.csv', 'best.ckpt', 'final.ckpt', 'locations.csv']:
        assert (trained_dir / name).read_bytes() == (again / name).read_bytes(), name


def test_numeric_failure_in_pretraining_keeps_last_good(mocker, tmp_path, data_dir, config_file, capsys):
    out = tmp_path / 'run'
    real_loss = training.localization_loss

    def poisoned_after_first_epoch(pred, gt):
        loss = real_loss(pred, gt)
        return loss * math.nan if (out / 'last.ckpt').exists() else loss

    mocker.patch('lesionaware.training.localization_loss', side_effect=poisoned_after_first_epoch)
    argv = ['train', '--data', str(data_dir), '--out', str(out), '--config', str(config_file)]
    assert main(argv + QUICK_FLAGS + ['--stage1-epochs', '2']) == 1
    assert 'error: NumericError' in capsys.readouterr().err
    assert load_checkpoint(out / 'last.ckpt').metadata == {'stage': 1, 'epoch': 1}


def test_sweep_wiring(mocker, tmp_path, data_dir):
    train_run = mocker.patch('lesionaware.cli._train_run', return_value=(mocker.sentinel.model, None))
    scores = mocker.Mock()
    scores.as_dict.return_value = {'accuracy': 1.0, 'jsi': 0.5}
    evaluate_run = mocker.patch('lesionaware.cli.evaluate_run', return_value=scores)

    out = tmp_path / 'sweep'
    argv = [
        'sweep', '--data', str(data_dir), '--out', str(out), '--ratios', '0,0.5', '--repeats', '2',
        '--seed', '4',
    ]
    assert main(argv) == 0

    calls = train_run.call_args_list
    assert [call.args[3] for call in calls] == [4, 4, 5, 5]
    vanilla, partial = calls[0].args[0], calls[1].args[0]
    assert vanilla.model.use_lanet is False
    assert vanilla.train.stage1_epochs == 0
    assert partial.model.use_lanet is True
    assert partial.train.keep_loc_ratio == 0.5
    assert calls[1].args[2] == out / 'ratio_0.50' / 'repeat_1'
    assert evaluate_run.call_count == 4
    assert evaluate_run.call_args.args[0] is mocker.sentinel.model

    frame = pd.read_csv(out / 'sweep.csv')
    assert frame.columns.tolist() == ['ratio', 'repeat', 'seed', 'accuracy', 'jsi']
    assert frame['seed'].tolist() == [4, 4, 5, 5]


def test_saliency_wiring(mocker, tmp_path, data_dir, trained_dir):
    run_saliency = mocker.patch('lesionaware.cli.run_saliency', return_value=tmp_path / 'cam.csv')
    out = tmp_path / 'cam'
    out.mkdir()
    argv = ['saliency', '--data', str(data_dir), '--checkpoint', str(trained_dir / 'best.ckpt'), '--out', str(out)]
    assert main(argv) == 0
    model, dataset, target = run_saliency.call_args.args
    assert not model.training
    assert len(dataset) == 10
    assert str(target) == str(out)
