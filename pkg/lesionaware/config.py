"""Typed run configuration and its layering.

Every record is a dataclass with `validate()`, `to_dict()` and `from_dict()`. A run's effective
configuration is built from three layers merged left to right, built-in defaults, an optional JSON
file, then command-line flags (unset flags are `None` and never override):

    >>> config = RunConfig.from_layers({'train': {'tau': 0.9}}, {'train': {'tau': None, 'lam': 1.0}})
    >>> config.train.tau, config.train.lam, config.train.alpha
    (0.9, 1.0, 0.1)
"""
import json
import logging
import numbers
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ._utils import cn, merge_layers
from .errors import ConfigError


__all__ = [
    'AugmentConfig',
    'FexConfig',
    'LanetConfig',
    'ModelConfig',
    'RunConfig',
    'SynthConfig',
    'TrainConfig',
    'load_config_file',
    'write_config',
]

log = logging.getLogger(__name__)

CONFIG_FILE_NAME = 'config.json'


class ConfigRecord:
    # field name -> nested record class
    nested_records = {}

    def validate(self):
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f'{cn(cls)}: unknown keys {unknown}')

        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for name, value in data.items():
            nested = cls.nested_records.get(name)
            if nested is not None:
                if not isinstance(value, nested):
                    if not isinstance(value, dict):
                        raise ConfigError(f'{cn(cls)}.{name} must be an object, got {value!r}')
                    value = nested.from_dict(value)
            else:
                value = _checked(cls, name, kinds[name], value)
            values[name] = value
        return cls(**values).validate()


def _is_number(value):
    return isinstance(value, numbers.Real) and not isinstance(value, bool)


def _is_integer(value):
    return isinstance(value, numbers.Integral) and not isinstance(value, bool)


def _checked(record, name, kind, value):
    """`value` converted to the field's declared type; a `ConfigError` naming the field otherwise."""
    if kind is bool and isinstance(value, bool):
        return value
    if kind is int and _is_integer(value):
        return int(value)
    if kind is float and _is_number(value):
        return float(value)
    if kind is str and isinstance(value, str):
        return value
    # lists hold per-stage counts, tuples hold numeric ranges
    item_ok = _is_integer if kind is list else _is_number
    if kind in (list, tuple) and isinstance(value, (list, tuple)) and all(map(item_ok, value)):
        return kind(value)
    expected = {
        bool: 'a boolean', int: 'an integer', float: 'a number', str: 'a string',
        list: 'a list of integers', tuple: 'a list of numbers',
    }
    raise ConfigError(f'{cn(record)}.{name} must be {expected[kind]}, got {value!r}')


def _require(condition, message):
    if not condition:
        raise ConfigError(message)


# --------------------------------------------------------------------------------------------------
# Model
# --------------------------------------------------------------------------------------------------
FEX_PRESETS = {
    'desk': {
        'stem_channels': 16,
        'channels_per_stage': [16, 32, 64, 128],
        'blocks_per_stage': [1, 1, 1, 1],
        'block': 'basic',
    },
    'resnet18': {
        'stem_channels': 64,
        'channels_per_stage': [64, 128, 256, 512],
        'blocks_per_stage': [2, 2, 2, 2],
        'block': 'basic',
    },
    'resnet50': {
        'stem_channels': 64,
        'channels_per_stage': [256, 512, 1024, 2048],
        'blocks_per_stage': [3, 4, 6, 3],
        'block': 'bottleneck',
    },
}


@dataclass
class FexConfig(ConfigRecord):
    n_stages: int = 4
    stem_channels: int = 16
    channels_per_stage: list = field(default_factory=lambda: [16, 32, 64, 128])
    blocks_per_stage: list = field(default_factory=lambda: [1, 1, 1, 1])
    input_size: int = 256
    in_channels: int = 1
    block: str = 'basic'

    @classmethod
    def preset(cls, name, **overrides):
        """Named topology (`desk`, `resnet18`, `resnet50`) with optional field overrides."""
        if name not in FEX_PRESETS:
            raise ConfigError(f'unknown FEX preset {name!r}; choose from {sorted(FEX_PRESETS)}')
        return cls.from_dict({**FEX_PRESETS[name], **overrides})

    def validate(self):
        _require(self.n_stages >= 2, f'n_stages must be >= 2, got {self.n_stages}')
        _require(
            len(self.channels_per_stage) == self.n_stages
            and len(self.blocks_per_stage) == self.n_stages,
            'channels_per_stage and blocks_per_stage need one entry per stage',
        )
        _require(
            all(c >= 1 for c in self.channels_per_stage) and all(b >= 1 for b in self.blocks_per_stage),
            'stage channels and block counts must be positive',
        )
        _require(self.block in ('basic', 'bottleneck'), f'unknown block type {self.block!r}')
        if self.block == 'bottleneck':
            _require(
                all(c % 4 == 0 for c in self.channels_per_stage),
                'bottleneck stage channels must be divisible by 4',
            )
        # datasets load as single-channel grayscale
        _require(self.in_channels == 1, f'in_channels must be 1, got {self.in_channels}')
        divisor = 2 ** self.n_stages
        _require(
            self.input_size >= divisor and self.input_size % divisor == 0,
            f'input_size {self.input_size} must be a positive multiple of 2^{self.n_stages}={divisor}',
        )
        return self

    @property
    def level_sizes(self):
        """Spatial size of each emitted level: the stride-2 stem then one halving per later stage."""
        return [self.input_size // 2 ** (i + 1) for i in range(self.n_stages)]


@dataclass
class LanetConfig(ConfigRecord):
    reduction: int = 16
    sam_kernel: int = 7
    head_kernel: int = 3
    cam_sharing: str = 'per_level'

    def validate(self):
        _require(self.reduction >= 1, 'reduction must be >= 1')
        _require(self.sam_kernel % 2 == 1, 'sam_kernel must be odd')
        _require(self.head_kernel % 2 == 1, 'head_kernel must be odd')
        _require(
            self.cam_sharing in ('per_level', 'projected'),
            f'cam_sharing must be per_level or projected, got {self.cam_sharing!r}',
        )
        return self


@dataclass
class ModelConfig(ConfigRecord):
    nested_records = {'fex': FexConfig, 'lanet': LanetConfig}

    fex: FexConfig = field(default_factory=FexConfig)
    lanet: LanetConfig = field(default_factory=LanetConfig)
    num_classes: int = 2
    use_lanet: bool = True
    use_cam: bool = True
    use_sam: bool = True
    use_mam: bool = True
    dtype: str = 'float32'

    def validate(self):
        self.fex.validate()
        self.lanet.validate()
        _require(self.num_classes >= 2, f'num_classes must be >= 2, got {self.num_classes}')
        _require(self.dtype in ('float32', 'float64'), f'unsupported dtype {self.dtype!r}')
        return self


# --------------------------------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------------------------------
@dataclass
class TrainConfig(ConfigRecord):
    lam: float = 0.5
    alpha: float = 0.1
    tau: float = 0.8
    lr: float = 0.001
    batch_labeled: int = 8
    batch_unlabeled: int = 8
    stage1_epochs: int = 20
    stage2_epochs: int = 100
    val_fraction: float = 0.15
    keep_loc_ratio: float = 1.0
    augment: bool = True
    seed: int = 0
    repeats: int = 3

    def validate(self):
        _require(0.0 <= self.lam <= 1.0, f'lambda must lie in [0, 1], got {self.lam}')
        _require(self.alpha >= 0.0, f'alpha must be >= 0, got {self.alpha}')
        _require(0.0 < self.tau < 1.0, f'tau must lie in (0, 1), got {self.tau}')
        _require(self.lr > 0.0, f'lr must be positive, got {self.lr}')
        _require(
            self.batch_labeled >= 1 and self.batch_unlabeled >= 1, 'batch sizes must be >= 1'
        )
        _require(
            self.stage1_epochs >= 0 and self.stage2_epochs >= 0, 'epoch counts must be >= 0'
        )
        _require(0.0 <= self.val_fraction < 1.0, 'val_fraction must lie in [0, 1)')
        _require(0.0 <= self.keep_loc_ratio <= 1.0, 'keep_loc_ratio must lie in [0, 1]')
        _require(self.repeats >= 1, 'repeats must be >= 1')
        return self


@dataclass
class AugmentConfig(ConfigRecord):
    max_rotation: float = 15.0
    flip_probability: float = 0.5
    brightness: float = 0.1
    contrast: float = 0.1

    def validate(self):
        _require(0.0 <= self.max_rotation <= 180.0, 'max_rotation must lie in [0, 180]')
        _require(0.0 <= self.flip_probability <= 1.0, 'flip_probability must lie in [0, 1]')
        _require(
            0.0 <= self.brightness < 1.0 and 0.0 <= self.contrast < 1.0,
            'brightness/contrast jitter must lie in [0, 1)',
        )
        return self


# --------------------------------------------------------------------------------------------------
# Data generation
# --------------------------------------------------------------------------------------------------
@dataclass
class SynthConfig(ConfigRecord):
    per_class: int = 50
    size: int = 64
    contrast: float = 0.55
    semi_axis_range: tuple = (0.18, 0.32)
    aspect_range: tuple = (0.55, 1.0)
    perturbation_amplitude: float = 0.28
    perturbation_lobes: tuple = (5, 9)
    speckle: float = 0.35
    seed: int = 0

    def validate(self):
        _require(self.per_class >= 1, f'per_class must be >= 1, got {self.per_class}')
        _require(self.size >= 16, f'size must be >= 16, got {self.size}')
        _require(0.0 < self.contrast < 1.0, 'contrast must lie in (0, 1)')
        _require(
            self.perturbation_amplitude > 0.0, 'malignant perturbation amplitude must be > 0'
        )
        for name in ('semi_axis_range', 'aspect_range', 'perturbation_lobes'):
            low, high = getattr(self, name)
            _require(0 < low <= high, f'{name} must be a nonempty positive range, got {(low, high)}')
        _require(self.semi_axis_range[1] < 0.5, 'lesions must fit inside the image')
        _require(self.aspect_range[1] <= 1.0, 'aspect_range must not exceed 1')
        _require(self.speckle >= 0.0, 'speckle must be >= 0')
        return self


# --------------------------------------------------------------------------------------------------
# Run
# --------------------------------------------------------------------------------------------------
@dataclass
class RunConfig(ConfigRecord):
    nested_records = {
        'model': ModelConfig,
        'train': TrainConfig,
        'augment': AugmentConfig,
        'synth': SynthConfig,
    }

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self):
        for record in (self.model, self.train, self.augment, self.synth):
            record.validate()
        return self

    @classmethod
    def from_layers(cls, *layers):
        """Defaults, then each layer in order; `None` leaves never override."""
        return cls.from_dict(merge_layers(cls().to_dict(), *layers))


def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding='utf-8') as handle:
            layer = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ConfigError(f'{path}: invalid JSON ({exc.msg} at line {exc.lineno})') from exc
    if not isinstance(layer, dict):
        raise ConfigError(f'{path}: top level must be an object')
    return layer


def write_config(config, out_dir):
    path = Path(out_dir) / CONFIG_FILE_NAME
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + '\n', encoding='utf-8')
    log.debug('wrote effective configuration to %s', path)
    return path
