"""Command-line entry point: `lesionaware <command> ...`.

Commands write their results into an output directory together with the effective configuration
(`config.json`). Failures print one line to stderr, `error: <ExceptionName>: <message>` with exit
status 1, or `usage-error: <message>` with exit status 2 for bad command lines.
"""
import argparse
import logging
import math
import shutil
import sys
from pathlib import Path

import pandas as pd
from pydash import get, set_

from .checkpoint import Checkpoint, check_compatible, load_checkpoint, restore_model, save_checkpoint
from .config import FEX_PRESETS, RunConfig, load_config_file, write_config
from .data import drop_location_labels, generate_synthetic, load_dataset, save_dataset, split
from .errors import (
    CheckpointError,
    ConfigError,
    DatasetLoadError,
    DimensionError,
    GraphError,
    NumericError,
    SplitError,
    UsageError,
    ValidationError,
)
from .metrics import evaluate, evaluate_run
from .model import build_model
from .records import ValueRequired
from .saliency import run_saliency
from .training import train, write_log


__all__ = ['build_parser', 'main']

log = logging.getLogger(__name__)

HANDLED_ERRORS = (
    CheckpointError,
    ConfigError,
    DatasetLoadError,
    DimensionError,
    GraphError,
    NumericError,
    SplitError,
    UsageError,
    ValidationError,
    ValueRequired,
    OSError,
)

# flag dest -> path in the run configuration
FLAG_PATHS = {
    'per_class': 'synth.per_class',
    'size': 'synth.size',
    'keep_loc_ratio': 'train.keep_loc_ratio',
    'lam': 'train.lam',
    'alpha': 'train.alpha',
    'tau': 'train.tau',
    'lr': 'train.lr',
    'stage1_epochs': 'train.stage1_epochs',
    'stage2_epochs': 'train.stage2_epochs',
    'batch_labeled': 'train.batch_labeled',
    'batch_unlabeled': 'train.batch_unlabeled',
    'val_fraction': 'train.val_fraction',
    'repeats': 'train.repeats',
    'augment': 'train.augment',
    'image_size': 'model.fex.input_size',
    'use_lanet': 'model.use_lanet',
    'use_cam': 'model.use_cam',
    'use_sam': 'model.use_sam',
    'use_mam': 'model.use_mam',
    'cam_sharing': 'model.lanet.cam_sharing',
    'dtype': 'model.dtype',
}

ABLATION_VARIANTS = {
    'full': {},
    'no_cam': {'use_cam': False},
    'no_sam': {'use_sam': False},
    'no_mam': {'use_mam': False},
}


class CommandLineError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CommandLineError(message)


# --------------------------------------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------------------------------------
def flag_layer(args):
    layer = {}
    for dest, path in FLAG_PATHS.items():
        value = getattr(args, dest, None)
        if value is not None:
            set_(layer, path, value)
    if getattr(args, 'seed', None) is not None:
        set_(layer, 'train.seed', args.seed)
        set_(layer, 'synth.seed', args.seed)
    preset = getattr(args, 'preset', None)
    if preset is not None:
        fex = {**FEX_PRESETS[preset], **get(layer, 'model.fex', {})}
        set_(layer, 'model.fex', fex)
    return layer


def effective_config(args, image_size=None):
    """Defaults < `--config` file < flags; `image_size` fills the input size if nothing set it."""
    file_layer = load_config_file(getattr(args, 'config', None))
    flags = flag_layer(args)
    layers = [file_layer, flags]
    if image_size is not None and get(file_layer, 'model.fex.input_size') is None \
            and get(flags, 'model.fex.input_size') is None:
        layers.insert(0, {'model': {'fex': {'input_size': image_size}}})
    return RunConfig.from_layers(*layers)


def _prepare_out(path, force=False):
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise UsageError(f'{out} exists and is not empty (use --force to overwrite)')
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _floats(row):
    return {key: float(value) for key, value in row.items()}


# --------------------------------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------------------------------
def cmd_gen_data(args):
    config = effective_config(args)
    out = _prepare_out(args.out, args.force)
    dataset = generate_synthetic(config.synth)
    manifest = save_dataset(dataset, out)
    write_config(config, out)
    benign, malignant = dataset.class_counts()[:2]
    print(f'{manifest}: {len(dataset)} samples ({benign} benign, {malignant} malignant)')
    return 0


def _train_run(config, dataset, out, seed):
    """Drop location labels, split, train both stages and write the run's artifacts."""
    train_config = config.train
    labeled = drop_location_labels(dataset, train_config.keep_loc_ratio, seed)
    train_set, val_set = split(labeled, train_config.val_fraction, seed)
    model = build_model(config.model, seed)

    def save_last_good(row):
        save_checkpoint(
            Checkpoint.from_model(model, stage=int(row['stage']), epoch=int(row['epoch'])),
            out / 'last.ckpt',
        )

    result = train(model, train_set, train_config, val_set, config.augment, save_last_good)
    write_log(result.history, out / 'epochs.csv')
    if result.stage1_history is not None:
        write_log(result.stage1_history, out / 'stage1.csv')
    best = _floats(result.best_row)
    save_checkpoint(
        Checkpoint.from_model(model, state=result.best_state, best_epoch=result.best_epoch, **best),
        out / 'best.ckpt',
    )
    save_checkpoint(
        Checkpoint.from_model(
            model, optimizer=result.optimizer, state=result.final_state,
            epoch=int(train_config.stage2_epochs),
        ),
        out / 'final.ckpt',
    )
    pd.DataFrame({
        'index': range(len(labeled)),
        'has_location': [s.has_location for s in labeled],
    }).to_csv(out / 'locations.csv', index=False, lineterminator='\n')
    return model, result


def cmd_train(args):
    dataset = load_dataset(args.data)
    config = effective_config(args, dataset.image_size if len(dataset) else None)
    out = _prepare_out(args.out, args.force)
    write_config(config, out)
    _, result = _train_run(config, dataset, out, config.train.seed)
    row = result.best_row
    print(
        f'{out / "best.ckpt"}: best epoch {result.best_epoch}, '
        f'val_accuracy={row.get("val_accuracy", math.nan):.4f} val_JSI={row.get("val_JSI", math.nan):.4f}'
    )
    return 0


def _load_models(paths, image_size):
    models = []
    for path in paths:
        checkpoint = load_checkpoint(path)
        check_compatible(checkpoint, image_size)
        models.append(restore_model(checkpoint))
    return models


def cmd_eval(args):
    dataset = load_dataset(args.data)
    models = _load_models(args.checkpoint, dataset.image_size)
    report = evaluate(
        models, dataset, as_bbox=args.as_bbox, threshold=args.threshold,
        largest_component=args.largest_component,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.to_csv(out / 'metrics.csv')
    report.per_sample_frame().to_csv(out / 'per_sample.csv', index=False, lineterminator='\n')
    table = report.to_table()
    (out / 'metrics.txt').write_text(table + '\n', encoding='utf-8')
    write_config(RunConfig(model=models[0].config), out)
    print(table)
    return 0


def _sweep_runs(args, variants):
    """Train and test every `(label, flag overrides)` variant for each repeat."""
    dataset = load_dataset(args.data)
    base = effective_config(args, dataset.image_size if len(dataset) else None)
    out = _prepare_out(args.out, args.force)
    write_config(base, out)
    rows = []
    for repeat in range(base.train.repeats):
        seed = base.train.seed + repeat
        pool, test_set = split(dataset, args.test_fraction, seed)
        for label, overrides in variants:
            config = RunConfig.from_layers(base.to_dict(), overrides)
            run_dir = out / label / f'repeat_{repeat + 1}'
            run_dir.mkdir(parents=True)
            log.info('run %s repeat %d (seed %d)', label, repeat + 1, seed)
            model, _ = _train_run(config, pool, run_dir, seed)
            scores = evaluate_run(model, test_set, as_bbox=args.as_bbox)
            rows.append({'variant': label, 'repeat': repeat + 1, 'seed': seed, **scores.as_dict()})
    return out, pd.DataFrame(rows)


def _ratio_label(ratio):
    return f'ratio_{ratio:.2f}'


def cmd_sweep(args):
    try:
        ratios = [float(r) for r in args.ratios.split(',') if r.strip()]
    except ValueError:
        raise ConfigError(f'--ratios must be comma-separated numbers, got {args.ratios!r}') from None
    variants = []
    for ratio in ratios:
        overrides = {'train': {'keep_loc_ratio': ratio}}
        if ratio == 0.0:
            # vanilla classifier baseline
            overrides['model'] = {'use_lanet': False}
            overrides['train']['stage1_epochs'] = 0
        variants.append((_ratio_label(ratio), overrides))
    out, frame = _sweep_runs(args, variants)
    frame.insert(0, 'ratio', frame.pop('variant').map({_ratio_label(r): r for r in ratios}))
    frame.to_csv(out / 'sweep.csv', index=False, lineterminator='\n')
    print(f'{out / "sweep.csv"}: {len(frame)} runs')
    return 0


def cmd_ablate(args):
    variants = [(name, {'model': flags}) for name, flags in ABLATION_VARIANTS.items()]
    out, frame = _sweep_runs(args, variants)
    frame.to_csv(out / 'ablation.csv', index=False, lineterminator='\n')
    print(f'{out / "ablation.csv"}: {len(frame)} runs')
    return 0


def cmd_saliency(args):
    dataset = load_dataset(args.data)
    (model,) = _load_models([args.checkpoint], dataset.image_size)
    path = run_saliency(model, dataset, args.out)
    write_config(RunConfig(model=model.config), args.out)
    print(f'{path}: {len(dataset)} heatmaps')
    return 0


# --------------------------------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------------------------------
def _add_common(parser):
    parser.add_argument('--config', type=Path, help='JSON file with configuration overrides')
    parser.add_argument('--seed', type=int, help='seed for generation, splits and initialization')
    parser.add_argument('--force', action='store_true', help='overwrite a non-empty output directory')


def _add_training(parser):
    parser.add_argument('--data', type=Path, required=True, help='dataset directory')
    parser.add_argument('--out', type=Path, required=True, help='output directory')
    parser.add_argument('--keep-loc-ratio', type=float, help='share of location labels to keep')
    parser.add_argument('--lambda', dest='lam', type=float, help='weight of the classification loss')
    parser.add_argument('--alpha', type=float, help='weight of the pseudo-label loss')
    parser.add_argument('--tau', type=float, help='pseudo-label binarization threshold')
    parser.add_argument('--lr', type=float, help='Adam learning rate')
    parser.add_argument('--stage1-epochs', type=int, help='location pre-training epochs')
    parser.add_argument('--epochs', dest='stage2_epochs', type=int, help='semi-supervised epochs')
    parser.add_argument('--batch-labeled', type=int)
    parser.add_argument('--batch-unlabeled', type=int)
    parser.add_argument('--val-fraction', type=float)
    parser.add_argument('--image-size', type=int, help='model input size (defaults to the dataset)')
    parser.add_argument('--preset', choices=sorted(FEX_PRESETS), help='feature extractor topology')
    parser.add_argument('--cam-sharing', choices=['per_level', 'projected'])
    parser.add_argument('--dtype', choices=['float32', 'float64'])
    parser.add_argument('--augment', action=argparse.BooleanOptionalAction, default=None)
    _add_common(parser)


def _add_ablation_flags(parser):
    parser.add_argument('--no-lanet', dest='use_lanet', action='store_const', const=False,
                        help='plain residual classifier without the lesion-aware branch')
    parser.add_argument('--no-cam', dest='use_cam', action='store_const', const=False)
    parser.add_argument('--no-sam', dest='use_sam', action='store_const', const=False)
    parser.add_argument('--no-mam', dest='use_mam', action='store_const', const=False)


def _add_sweep(parser):
    _add_training(parser)
    parser.add_argument('--repeats', type=int, help='independent seeds per variant')
    parser.add_argument('--test-fraction', type=float, default=0.2, help='held-out test share')
    parser.add_argument('--as-bbox', action='store_true')


def build_parser():
    parser = _Parser(prog='lesionaware', description=__doc__.splitlines()[0])
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v info, -vv debug')
    commands = parser.add_subparsers(dest='command', required=True)

    gen_data = commands.add_parser('gen-data', help='generate a synthetic dataset')
    gen_data.add_argument('--out', type=Path, required=True)
    gen_data.add_argument('--per-class', type=int)
    gen_data.add_argument('--size', type=int)
    _add_common(gen_data)
    gen_data.set_defaults(handler=cmd_gen_data)

    train_cmd = commands.add_parser('train', help='two-stage training')
    _add_training(train_cmd)
    _add_ablation_flags(train_cmd)
    train_cmd.set_defaults(handler=cmd_train)

    eval_cmd = commands.add_parser('eval', help='evaluate one or more checkpoints')
    eval_cmd.add_argument('--data', type=Path, required=True)
    eval_cmd.add_argument('--checkpoint', type=Path, action='append', required=True)
    eval_cmd.add_argument('--out', type=Path, required=True)
    eval_cmd.add_argument('--as-bbox', action='store_true',
                          help='score bbox-labeled samples with the predicted mask\'s bounding box')
    eval_cmd.add_argument('--largest-component', action='store_true')
    eval_cmd.add_argument('--threshold', type=float, default=0.5)
    eval_cmd.set_defaults(handler=cmd_eval)

    sweep = commands.add_parser('sweep', help='train and test across location-label ratios')
    _add_sweep(sweep)
    sweep.add_argument('--ratios', default='0,0.25,0.5,0.75,1.0')
    sweep.set_defaults(handler=cmd_sweep)

    ablate = commands.add_parser('ablate', help='train and test the attention ablation variants')
    _add_sweep(ablate)
    ablate.set_defaults(handler=cmd_ablate)

    saliency = commands.add_parser('saliency', help='Grad-CAM heatmaps for a dataset')
    saliency.add_argument('--data', type=Path, required=True)
    saliency.add_argument('--checkpoint', type=Path, required=True)
    saliency.add_argument('--out', type=Path, required=True)
    saliency.set_defaults(handler=cmd_saliency)
    return parser


def _one_line(message):
    return ' '.join(str(message).split())


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except CommandLineError as exc:
        print(f'usage-error: {_one_line(exc)}', file=sys.stderr)
        return 2

    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format='%(levelname)s %(name)s: %(message)s', stream=sys.stderr)
    try:
        return args.handler(args)
    except HANDLED_ERRORS as exc:
        print(f'error: {type(exc).__name__}: {_one_line(exc)}', file=sys.stderr)
        return 1
