"""Samples, datasets and everything that produces or reshapes them.

A `Sample` always has a class label; its lesion location (a pixel mask or a bounding box) is
optional, which is the incomplete-supervision setting training is built for. Bounding boxes use
pixel coordinates with exclusive ends, so `BoxLocation(10, 10, 20, 20)` covers columns and rows
10..19.

On disk a dataset is a directory:

    manifest.csv        file,class,loc_type,loc_data
    images/00000.png    8-bit grayscale
    masks/00000.png     8-bit, lesion pixels 255 (only for loc_type=mask)

`loc_type` is one of `none`, `mask`, `bbox`; `loc_data` is the mask path or `x0;y0;x1;y1`.
"""
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import ClassVar, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage

from ._utils import round_half_up, seeded_rng
from .config import AugmentConfig, SynthConfig
from .errors import ConfigError, DatasetLoadError, DimensionError, SplitError, ValidationError
from .records import NOS, DataFrameRecordConverter, RecordConverter


__all__ = [
    'AugmentParams',
    'BoxLocation',
    'Dataset',
    'MaskLocation',
    'Sample',
    'augment',
    'drop_location_labels',
    'generate_synthetic',
    'load_dataset',
    'rasterize_location',
    'save_dataset',
    'split',
]

log = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.csv'
MANIFEST_COLUMNS = ['file', 'class', 'loc_type', 'loc_data']
BENIGN, MALIGNANT = 0, 1


# --------------------------------------------------------------------------------------------------
# Domain types
# --------------------------------------------------------------------------------------------------
@dataclass(frozen=True)
class BoxLocation:
    """Axis-aligned box `[x0, x1) x [y0, y1)` in pixel coordinates."""

    kind: ClassVar[str] = 'bbox'

    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, height, width):
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValidationError(f'bbox {self.as_tuple()} outside a {width}x{height} image')
        return self

    def as_tuple(self):
        return (self.x0, self.y0, self.x1, self.y1)

    def to_mask(self, height, width):
        mask = np.zeros((height, width), dtype=bool)
        mask[self.y0:self.y1, self.x0:self.x1] = True
        return mask

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)


@dataclass(frozen=True, eq=False)
class MaskLocation:
    kind: ClassVar[str] = 'mask'

    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'mask', np.asarray(self.mask, dtype=bool))

    def __eq__(self, other):
        return isinstance(other, MaskLocation) and np.array_equal(self.mask, other.mask)

    def validate(self, height, width):
        if self.mask.shape != (height, width):
            raise ValidationError(
                f'mask shape {self.mask.shape} does not match image shape {(height, width)}'
            )
        return self

    def to_mask(self, height, width):
        return self.validate(height, width).mask.copy()


Location = Union[MaskLocation, BoxLocation]


@dataclass(eq=False)
class Sample:
    image: np.ndarray
    class_label: int
    location: Optional[Location] = None

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and self.class_label == other.class_label
            and self.location == other.location
            and np.array_equal(self.image, other.image)
        )

    @property
    def has_location(self):
        return self.location is not None

    @property
    def shape(self):
        return self.image.shape

    def validate(self, num_classes=None):
        if self.image.ndim != 2:
            raise ValidationError(f'image must be 2-d grayscale, got shape {self.image.shape}')
        if self.image.size and (self.image.min() < 0.0 or self.image.max() > 1.0):
            raise ValidationError('image values must lie in [0, 1]')
        if num_classes is not None and not 0 <= self.class_label < num_classes:
            raise ValidationError(f'class {self.class_label} outside [0, {num_classes})')
        if self.location is not None:
            self.location.validate(*self.image.shape)
        return self

    def location_mask(self):
        """Full-resolution boolean lesion region, or `None` without a location label."""
        if self.location is None:
            return None
        return self.location.to_mask(*self.image.shape)


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    num_classes: int = 2

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, index):
        return self.samples[index]

    def __eq__(self, other):
        return (
            isinstance(other, Dataset)
            and self.num_classes == other.num_classes
            and len(self) == len(other)
            and all(a == b for a, b in zip(self.samples, other.samples))
        )

    @property
    def image_size(self):
        shapes = {s.image.shape for s in self.samples}
        if len(shapes) != 1:
            raise ValidationError(f'dataset images must share one size, found {sorted(shapes)}')
        height, width = shapes.pop()
        if height != width:
            raise ValidationError(f'images must be square, got {height}x{width}')
        return height

    @property
    def labels(self):
        return np.array([s.class_label for s in self.samples], dtype=int)

    def located_indices(self):
        return [i for i, s in enumerate(self.samples) if s.has_location]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], self.num_classes)

    def images(self):
        return np.stack([s.image for s in self.samples]) if self.samples else np.zeros((0, 0, 0))


# --------------------------------------------------------------------------------------------------
# Synthetic generation
# --------------------------------------------------------------------------------------------------
def _lesion_region(rng, config, label):
    size = config.size
    semi_major = rng.uniform(*config.semi_axis_range) * size
    semi_minor = semi_major * rng.uniform(*config.aspect_range)
    amplitude = config.perturbation_amplitude if label == MALIGNANT else 0.0
    extent = int(math.ceil(semi_major * (1.0 + amplitude))) + 1
    low, high = extent, size - 1 - extent
    center_y, center_x = rng.uniform(low, max(low, high), size=2)
    angle = rng.uniform(0.0, math.pi)
    lobes = int(rng.integers(config.perturbation_lobes[0], config.perturbation_lobes[1] + 1))
    phase = rng.uniform(0.0, 2 * math.pi)

    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = rows - center_y, cols - center_x
    # rotate into the ellipse frame
    u = (dx * math.cos(angle) + dy * math.sin(angle)) / semi_major
    v = (-dx * math.sin(angle) + dy * math.cos(angle)) / semi_minor
    radius = np.hypot(u, v)
    boundary = 1.0 + amplitude * np.sin(lobes * np.arctan2(v, u) + phase)
    region = radius <= boundary
    region[int(round(center_y)), int(round(center_x))] = True
    return region


def _speckle_image(rng, config, region):
    size = config.size
    tissue = 0.6 + 0.15 * ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 8)
    tissue = np.where(region, tissue * (1.0 - config.contrast), tissue)
    # unit-mean Rayleigh speckle, slightly smoothed into grains
    speckle = rng.rayleigh(scale=1.0, size=(size, size)) / math.sqrt(math.pi / 2)
    speckle = 1.0 + config.speckle * (ndimage.gaussian_filter(speckle, sigma=0.7) - 1.0)
    image = np.clip(tissue * speckle, 0.0, 1.0)
    return np.round(image * 255.0) / 255.0


def generate_synthetic(config=None):
    """Speckled ultrasound-like images with one darker lesion each, fully location-labeled.

    Benign lesions are smooth ellipses, malignant ones have a radially perturbed boundary. Labels
    alternate benign/malignant so both classes get exactly `per_class` samples.
    """
    config = config or SynthConfig()
    if config.per_class < 1:
        raise ConfigError(f'per_class must be >= 1, got {config.per_class}')
    config.validate()
    rng = seeded_rng(config.seed, 'synthetic')
    samples = []
    for index in range(2 * config.per_class):
        label = index % 2
        region = _lesion_region(rng, config, label)
        image = _speckle_image(rng, config, region)
        samples.append(Sample(image, label, MaskLocation(region)))
    log.info('generated %d synthetic samples of size %d', len(samples), config.size)
    return Dataset(samples, num_classes=2)


# --------------------------------------------------------------------------------------------------
# Label dropping and splitting
# --------------------------------------------------------------------------------------------------
def drop_location_labels(dataset, keep_ratio, seed):
    """Keep location labels on `round_half_up(keep_ratio * located)` seed-chosen samples.

    The kept samples are a prefix of one seeded permutation, so a smaller ratio keeps a subset of
    what a larger ratio keeps.
    """
    if not 0.0 <= keep_ratio <= 1.0:
        raise ConfigError(f'keep_ratio must lie in [0, 1], got {keep_ratio}')
    located = dataset.located_indices()
    keep_count = round_half_up(keep_ratio * len(located))
    order = seeded_rng(seed, 'drop_location_labels').permutation(len(located))
    kept = {located[i] for i in order[:keep_count]}
    samples = [
        sample if (i in kept or not sample.has_location) else replace(sample, location=None)
        for i, sample in enumerate(dataset.samples)
    ]
    log.info('kept location labels on %d of %d located samples', keep_count, len(located))
    return Dataset(samples, dataset.num_classes)


def split(dataset, val_fraction, seed):
    """Stratified `(train, val)` partition with `round_half_up(N * val_fraction)` validation samples.

    Per-class validation counts follow largest-remainder allocation (ties to the lower class).
    """
    if not 0.0 <= val_fraction < 1.0:
        raise ConfigError(f'val_fraction must lie in [0, 1), got {val_fraction}')
    if val_fraction == 0.0:
        return dataset, Dataset([], dataset.num_classes)

    labels = dataset.labels
    counts = np.bincount(labels, minlength=dataset.num_classes)
    for label, count in enumerate(counts):
        if 0 < count < 2:
            raise SplitError(f'class {label} has {count} sample; stratified split needs >= 2')

    total_val = round_half_up(len(dataset) * val_fraction)
    quotas = counts * total_val / len(dataset)
    val_counts = np.floor(quotas).astype(int)
    remainder = total_val - val_counts.sum()
    for label in sorted(range(len(counts)), key=lambda c: (-(quotas[c] - val_counts[c]), c))[:remainder]:
        val_counts[label] += 1
    val_counts = np.minimum(val_counts, np.maximum(counts - 1, 0))

    rng = seeded_rng(seed, 'split')
    val_indices = []
    for label in range(len(counts)):
        members = np.flatnonzero(labels == label)
        val_indices.extend(rng.permutation(members)[:val_counts[label]].tolist())
    val_set = set(val_indices)
    train_indices = [i for i in range(len(dataset)) if i not in val_set]
    return dataset.subset(train_indices), dataset.subset(sorted(val_set))


# --------------------------------------------------------------------------------------------------
# Augmentation
# --------------------------------------------------------------------------------------------------
@dataclass(frozen=True)
class AugmentParams:
    angle: float = 0.0
    flip_horizontal: bool = False
    flip_vertical: bool = False
    brightness: float = 1.0
    contrast: float = 1.0

    @property
    def is_identity(self):
        return (
            self.angle == 0.0
            and not self.flip_horizontal
            and not self.flip_vertical
            and self.brightness == 1.0
            and self.contrast == 1.0
        )

    @classmethod
    def draw(cls, rng, config=None):
        config = config or AugmentConfig()
        return cls(
            angle=float(rng.uniform(-config.max_rotation, config.max_rotation)),
            flip_horizontal=bool(rng.random() < config.flip_probability),
            flip_vertical=bool(rng.random() < config.flip_probability),
            brightness=float(rng.uniform(1.0 - config.brightness, 1.0 + config.brightness)),
            contrast=float(rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)),
        )

    def inverse_matrix(self, height, width):
        """Output-to-input affine map `(matrix, offset)` in (row, col) coordinates."""
        theta = math.radians(self.angle)
        rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        flips = np.diag([-1.0 if self.flip_vertical else 1.0, -1.0 if self.flip_horizontal else 1.0])
        center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
        matrix = flips @ rotation.T
        return matrix, center - matrix @ center

    def forward_points(self, points, height, width):
        """Map `(row, col)` points from input to output coordinates."""
        theta = math.radians(self.angle)
        rotation = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
        flips = np.diag([-1.0 if self.flip_vertical else 1.0, -1.0 if self.flip_horizontal else 1.0])
        center = np.array([(height - 1) / 2.0, (width - 1) / 2.0])
        return (rotation @ flips @ (np.asarray(points, dtype=float) - center).T).T + center


def _warp(array, params, order, mode):
    if params.angle == 0.0:
        if params.flip_horizontal:
            array = array[:, ::-1]
        if params.flip_vertical:
            array = array[::-1, :]
        return np.ascontiguousarray(array)
    matrix, offset = params.inverse_matrix(*array.shape)
    return ndimage.affine_transform(array, matrix, offset=offset, order=order, mode=mode)


def _warp_box(box, params, height, width):
    corners = [
        (box.y0, box.x0), (box.y0, box.x1 - 1), (box.y1 - 1, box.x0), (box.y1 - 1, box.x1 - 1),
    ]
    mapped = params.forward_points(corners, height, width)
    rows, cols = mapped[:, 0], mapped[:, 1]
    # round away float noise before taking the hull of pixel centres
    rows, cols = np.round(rows, 9), np.round(cols, 9)
    y0, y1 = int(math.floor(rows.min())), int(math.ceil(rows.max())) + 1
    x0, x1 = int(math.floor(cols.min())), int(math.ceil(cols.max())) + 1
    y0, x0 = max(0, y0), max(0, x0)
    y1, x1 = min(height, max(y1, y0 + 1)), min(width, max(x1, x0 + 1))
    return BoxLocation(x0, y0, x1, y1)


def augment(sample, rng, config=None, params=None):
    """Random rotation, flips and brightness/contrast jitter; geometry applies to the location too."""
    params = params if params is not None else AugmentParams.draw(rng, config)
    if params.is_identity:
        return replace(sample, image=sample.image.copy())

    height, width = sample.image.shape
    image = _warp(sample.image, params, order=1, mode='nearest')
    if params.brightness != 1.0 or params.contrast != 1.0:
        mean = image.mean()
        image = ((image - mean) * params.contrast + mean) * params.brightness
    image = np.clip(image, 0.0, 1.0)

    location = sample.location
    if isinstance(location, MaskLocation):
        warped = _warp(location.mask.astype(np.float64), params, order=0, mode='constant')
        location = MaskLocation(warped >= 0.5)
    elif isinstance(location, BoxLocation):
        location = _warp_box(location, params, height, width)
    return Sample(image, sample.class_label, location)


def rasterize_location(location, image_size, out_size):
    """Binary `[out_size, out_size]` target: area-downsampled region thresholded at 0.5."""
    if image_size % out_size:
        raise DimensionError(f'image size {image_size} is not a multiple of target size {out_size}')
    factor = image_size // out_size
    region = location.to_mask(image_size, image_size).astype(np.float64)
    coverage = region.reshape(out_size, factor, out_size, factor).mean(axis=(1, 3))
    return (coverage >= 0.5).astype(np.float64)


# --------------------------------------------------------------------------------------------------
# Persistence
# --------------------------------------------------------------------------------------------------
def read_png(path):
    with Image.open(path) as handle:
        return np.asarray(handle.convert('L'), dtype=np.float64) / 255.0


def write_png(path, array):
    pixels = np.clip(np.round(np.asarray(array, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(pixels).save(path, format='PNG')


def load_image(value, context):
    path = Path(context['root']) / value
    if not path.is_file():
        raise FileNotFoundError(f'missing image file {value}')
    return read_png(path)


def parse_class_label(value, context):
    try:
        label = int(value)
    except ValueError:
        raise ValueError(f'class {value!r} is not an integer') from None
    num_classes = context.get('num_classes')
    if num_classes is not None and not 0 <= label < num_classes:
        raise ValueError(f'class {label} outside [0, {num_classes})')
    return label


def parse_location(value, source, context):
    data = str(source.get('loc_data', '') or '').strip()
    if value == 'none':
        return None
    if value == 'mask':
        if not data:
            raise ValueError('loc_type mask needs a mask path in loc_data')
        return MaskLocation(load_image(data, context) >= 0.5)
    if value == 'bbox':
        parts = data.split(';')
        try:
            x0, y0, x1, y1 = (int(p) for p in parts)
        except ValueError:
            raise ValueError(f'bbox {data!r} is not x0;y0;x1;y1 integers') from None
        return BoxLocation(x0, y0, x1, y1)
    raise ValueError(f'unknown loc_type {value!r}')


def location_kind(location):
    return getattr(location, 'kind', 'none')


def location_data(location, context):
    if isinstance(location, BoxLocation):
        return ';'.join(str(v) for v in location.as_tuple())
    if isinstance(location, MaskLocation):
        return context['mask_file']
    return ''


RecordConverter.register_converter_for_name(load_image, 'png')


class ManifestRowConverter(DataFrameRecordConverter):
    to_class = Sample
    conversions = [
        ('image', 'file', {'converter': 'png', 'required': True}),
        ('class_label', 'class', {'converter': parse_class_label, 'required': True}),
        ('location', 'loc_type', {'converter': parse_location, 'default': 'none'}),
    ]

    def post_convert(self, sample):
        return sample.validate(self.context.get('num_classes'))


class SampleRowConverter(RecordConverter):
    from_class = Sample
    conversions = [
        ('file', NOS),
        ('class', 'class_label', str),
        ('loc_type', 'location', {'converter': location_kind, 'default': 'none'}),
        ('loc_data', 'location', {'converter': location_data, 'default': ''}),
    ]


def save_dataset(dataset, root_path):
    root = Path(root_path)
    (root / 'images').mkdir(parents=True, exist_ok=True)
    rows = []
    for index, sample in enumerate(dataset):
        file_name = f'images/{index:05d}.png'
        write_png(root / file_name, sample.image)
        mask_file = f'masks/{index:05d}.png'
        if isinstance(sample.location, MaskLocation):
            (root / 'masks').mkdir(exist_ok=True)
            write_png(root / mask_file, sample.location.mask.astype(np.float64))
        rows.append(
            SampleRowConverter.convert(sample, file=file_name, context={'mask_file': mask_file})
        )
    manifest = root / MANIFEST_NAME
    pd.DataFrame(rows, columns=MANIFEST_COLUMNS).to_csv(
        manifest, index=False, lineterminator='\n', encoding='utf-8'
    )
    log.info('saved %d samples to %s', len(dataset), root)
    return manifest


def load_dataset(root_path, num_classes=2):
    root = Path(root_path)
    manifest = root / MANIFEST_NAME
    if not manifest.is_file():
        raise DatasetLoadError(str(manifest), 'manifest not found')
    try:
        frame = ManifestRowConverter.read_csv(manifest)
    except (ValueError, pd.errors.ParserError) as exc:
        raise DatasetLoadError(MANIFEST_NAME, f'malformed manifest ({exc})') from exc
    missing = [c for c in ('file', 'class') if c not in frame.columns]
    if missing:
        raise DatasetLoadError(MANIFEST_NAME, f'missing columns {missing}')

    context = {'root': root, 'num_classes': num_classes}
    samples = []
    for position, (_, row) in enumerate(frame.iterrows()):
        try:
            samples.append(ManifestRowConverter.convert(row, context=context))
        except (ValueError, OSError) as exc:
            # header is line 1
            entry = f'{MANIFEST_NAME} line {position + 2} ({row.get("file", "?")})'
            raise DatasetLoadError(entry, str(exc)) from exc
    log.info('loaded %d samples (%d located) from %s', len(samples), sum(s.has_location for s in samples), root)
    return Dataset(samples, num_classes)
