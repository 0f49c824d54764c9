"""Binary checkpoint files.

Layout (all integers little-endian):

    8 bytes   magic b'LSNAWCKP'
    1 byte    format version
    uint32    header length, then the UTF-8 JSON header (sorted keys)
    entries   uint16 name length, name, uint8 scalar width (4 or 8), uint8 ndim,
              ndim x uint32 dims, payload as little-endian floats

The header holds the model configuration, the seed, free-form metadata (best epoch, metrics) and
the optimizer's scalar state; entries hold every parameter and buffer, then the optimizer moments
as `adam.m.<name>` / `adam.v.<name>`. Serialization is deterministic, so save -> load -> save
reproduces the file byte for byte.
"""
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError, ConfigError, IncompatibleCheckpointError
from .model import build_model
from .training import OptimizerState


__all__ = [
    'Checkpoint',
    'FORMAT_VERSION',
    'check_compatible',
    'load_checkpoint',
    'restore_model',
    'save_checkpoint',
]

log = logging.getLogger(__name__)

MAGIC = b'LSNAWCKP'
FORMAT_VERSION = 1
_WIDTHS = {4: '<f4', 8: '<f8'}
_NATIVE = {4: np.float32, 8: np.float64}


@dataclass
class Checkpoint:
    config: ModelConfig
    seed: int
    state: OrderedDict
    optimizer: Optional[OptimizerState] = None
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, optimizer=None, state=None, **metadata):
        return cls(
            config=model.config,
            seed=model.seed,
            state=OrderedDict(state if state is not None else model.state_dict()),
            optimizer=optimizer,
            metadata=metadata,
        )

    @property
    def input_size(self):
        return self.config.fex.input_size


# --------------------------------------------------------------------------------------------------
# Encoding
# --------------------------------------------------------------------------------------------------
def _encode_entry(name, array):
    array = np.asarray(array)
    width = array.dtype.itemsize
    if width not in _WIDTHS or array.dtype.kind != 'f':
        raise CheckpointError(f'{name}: unsupported dtype {array.dtype}')
    encoded = name.encode('utf-8')
    return b''.join([
        struct.pack('<H', len(encoded)),
        encoded,
        struct.pack('<BB', width, array.ndim),
        struct.pack(f'<{array.ndim}I', *array.shape),
        np.ascontiguousarray(array, dtype=_WIDTHS[width]).tobytes(),
    ])


def _optimizer_entries(optimizer):
    entries = []
    for kind, moments in (('m', optimizer.m), ('v', optimizer.v)):
        entries.extend((f'adam.{kind}.{name}', moments[name]) for name in sorted(moments))
    return entries


def encode(checkpoint):
    header = {
        'config': checkpoint.config.to_dict(),
        'seed': int(checkpoint.seed),
        'metadata': checkpoint.metadata,
        'n_state': len(checkpoint.state),
        'optimizer': None,
    }
    entries = list(checkpoint.state.items())
    if checkpoint.optimizer is not None:
        optimizer = checkpoint.optimizer
        header['optimizer'] = {
            'step': optimizer.step, 'beta1': optimizer.beta1, 'beta2': optimizer.beta2,
            'eps': optimizer.eps,
        }
        entries += _optimizer_entries(optimizer)
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise CheckpointError('checkpoint entry names must be unique')
    header['n_entries'] = len(entries)

    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    parts = [MAGIC, struct.pack('<BI', FORMAT_VERSION, len(header_bytes)), header_bytes]
    parts.extend(_encode_entry(name, array) for name, array in entries)
    return b''.join(parts)


class _Reader:
    def __init__(self, data):
        self.data = data
        self.offset = 0

    def take(self, count):
        if self.offset + count > len(self.data):
            raise CheckpointError('checkpoint is truncated')
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_entry(reader):
    (name_length,) = reader.unpack('<H')
    try:
        name = reader.take(name_length).decode('utf-8')
    except UnicodeDecodeError as exc:
        raise CheckpointError(f'corrupt checkpoint entry name ({exc})') from exc
    width, ndim = reader.unpack('<BB')
    if width not in _WIDTHS:
        raise CheckpointError(f'{name}: unsupported scalar width {width}')
    shape = reader.unpack(f'<{ndim}I') if ndim else ()
    count = int(np.prod(shape)) if ndim else 1
    payload = reader.take(count * width)
    array = np.frombuffer(payload, dtype=_WIDTHS[width]).astype(_NATIVE[width]).reshape(shape)
    return name, array


def _read_header(reader, header_length):
    try:
        header = json.loads(reader.take(header_length).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f'corrupt checkpoint header ({exc})') from exc
    if not isinstance(header, dict):
        raise CheckpointError('corrupt checkpoint header (not an object)')
    missing = sorted({'config', 'seed', 'metadata', 'n_state', 'n_entries', 'optimizer'} - set(header))
    if missing:
        raise CheckpointError(f'corrupt checkpoint header (missing {missing})')
    counts = header['n_state'], header['n_entries']
    if not all(isinstance(n, int) and not isinstance(n, bool) for n in counts) \
            or not 0 <= counts[0] <= counts[1]:
        raise CheckpointError(f'corrupt checkpoint header (entry counts {list(counts)})')
    if not isinstance(header['config'], dict) or not isinstance(header['metadata'], dict):
        raise CheckpointError('corrupt checkpoint header (config and metadata must be objects)')
    return header


def _decode_optimizer(settings, entries):
    try:
        optimizer = OptimizerState(**settings)
    except TypeError as exc:
        raise CheckpointError(f'corrupt optimizer state ({exc})') from exc
    for name, array in entries:
        prefix, kind, parameter = (name.split('.', 2) + ['', ''])[:3]
        if prefix != 'adam' or kind not in ('m', 'v') or not parameter:
            raise CheckpointError(f'{name!r} is not an optimizer moment entry')
        getattr(optimizer, kind)[parameter] = array
    return optimizer


def decode(data):
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError('not a lesionaware checkpoint (bad magic)')
    version, header_length = reader.unpack('<BI')
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f'checkpoint format version {version} is not supported (expected {FORMAT_VERSION})'
        )
    header = _read_header(reader, header_length)

    entries = [_decode_entry(reader) for _ in range(header['n_entries'])]
    if reader.offset != len(data):
        raise CheckpointError('trailing bytes after the last checkpoint entry')
    state = OrderedDict(entries[:header['n_state']])

    optimizer = None
    if header['optimizer'] is not None:
        if not isinstance(header['optimizer'], dict):
            raise CheckpointError('corrupt optimizer state (not an object)')
        optimizer = _decode_optimizer(header['optimizer'], entries[header['n_state']:])
    try:
        config = ModelConfig.from_dict(header['config'])
    except ConfigError as exc:
        raise CheckpointError(f'invalid model configuration ({exc})') from exc
    return Checkpoint(
        config=config,
        seed=header['seed'],
        state=state,
        optimizer=optimizer,
        metadata=header['metadata'],
        version=version,
    )


# --------------------------------------------------------------------------------------------------
# Files and models
# --------------------------------------------------------------------------------------------------
def save_checkpoint(checkpoint, path):
    path = Path(path)
    path.write_bytes(encode(checkpoint))
    log.debug('saved checkpoint %s (%d entries)', path, len(checkpoint.state))
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f'{path}: checkpoint not found') from None
    try:
        return decode(data)
    except CheckpointError as exc:
        raise type(exc)(f'{path}: {exc}') from exc


def check_compatible(checkpoint, image_size):
    if checkpoint.input_size != image_size:
        raise IncompatibleCheckpointError(
            f'checkpoint was trained at {checkpoint.input_size}x{checkpoint.input_size}, '
            f'dataset images are {image_size}x{image_size}'
        )


def restore_model(checkpoint):
    model = build_model(checkpoint.config, checkpoint.seed)
    model.load_state_dict(checkpoint.state)
    model.eval()
    return model
