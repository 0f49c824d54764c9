import json
import struct

import numpy as np
import pytest

from lesionaware.checkpoint import (
    FORMAT_VERSION,
    MAGIC,
    Checkpoint,
    check_compatible,
    _encode_entry,
    decode,
    encode,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from lesionaware.errors import CheckpointError, IncompatibleCheckpointError
from lesionaware.training import OptimizerState, adam_step


@pytest.fixture
def trained_checkpoint(tiny_model, rng):
    # a forward pass in training mode moves the running statistics
    tiny_model(rng.uniform(size=(2, 16, 16)))
    params = dict(tiny_model.named_parameters())
    optimizer = OptimizerState()
    adam_step(params, {name: np.ones_like(p.data) for name, p in params.items()}, optimizer, 0.01)
    return Checkpoint.from_model(tiny_model, optimizer, best_epoch=3, val_accuracy=0.75)


def test_save_load_save_is_byte_identical(trained_checkpoint, tmp_path):
    first = save_checkpoint(trained_checkpoint, tmp_path / 'a.ckpt')
    second = save_checkpoint(load_checkpoint(first), tmp_path / 'b.ckpt')
    assert first.read_bytes() == second.read_bytes()


def test_round_trip_contents(trained_checkpoint):
    loaded = decode(encode(trained_checkpoint))
    assert loaded.config == trained_checkpoint.config
    assert loaded.seed == trained_checkpoint.seed
    assert loaded.metadata == {'best_epoch': 3, 'val_accuracy': 0.75}
    assert loaded.version == FORMAT_VERSION
    assert list(loaded.state) == list(trained_checkpoint.state)
    for name, value in trained_checkpoint.state.items():
        assert loaded.state[name].dtype == value.dtype
        assert np.array_equal(loaded.state[name], value)

    optimizer = loaded.optimizer
    assert optimizer.step == 1
    assert sorted(optimizer.m) == sorted(trained_checkpoint.optimizer.m)
    for name, moment in trained_checkpoint.optimizer.v.items():
        assert np.array_equal(optimizer.v[name], moment)


def test_restored_model_predicts_identically(tiny_model, trained_checkpoint, rng):
    model = restore_model(decode(encode(trained_checkpoint)))
    images = rng.uniform(size=(3, 16, 16))
    expected = tiny_model.predict(images)
    got = model.predict(images)
    assert not model.training
    assert np.array_equal(got.probs, expected.probs)
    assert np.array_equal(got.masks, expected.masks)


def test_checkpoint_without_optimizer(tiny_model):
    loaded = decode(encode(Checkpoint.from_model(tiny_model)))
    assert loaded.optimizer is None
    assert loaded.metadata == {}


def test_float32_model_round_trip(tiny_model_config):
    from lesionaware.model import build_model

    tiny_model_config.dtype = 'float32'
    model = build_model(tiny_model_config, seed=1)
    loaded = decode(encode(Checkpoint.from_model(model)))
    assert all(value.dtype == np.float32 for value in loaded.state.values())


def test_bad_magic(trained_checkpoint):
    data = encode(trained_checkpoint)
    with pytest.raises(CheckpointError, match='bad magic'):
        decode(b'NOTACKPT' + data[8:])


def test_version_mismatch(trained_checkpoint):
    data = bytearray(encode(trained_checkpoint))
    data[8] = FORMAT_VERSION + 1
    with pytest.raises(CheckpointError, match='version 2 is not supported'):
        decode(bytes(data))


def test_truncated_and_trailing_bytes(trained_checkpoint):
    data = encode(trained_checkpoint)
    with pytest.raises(CheckpointError, match='truncated'):
        decode(data[:-3])
    with pytest.raises(CheckpointError, match='trailing'):
        decode(data + b'\0')


def test_corrupt_header(trained_checkpoint):
    data = encode(trained_checkpoint)
    (length,) = struct.unpack('<I', data[9:13])
    corrupt = data[:13] + b'{' * length + data[13 + length:]
    with pytest.raises(CheckpointError, match='corrupt checkpoint header'):
        decode(corrupt)


def test_load_errors_name_the_file(tmp_path):
    with pytest.raises(CheckpointError, match='missing.ckpt: checkpoint not found'):
        load_checkpoint(tmp_path / 'missing.ckpt')
    path = tmp_path / 'junk.ckpt'
    path.write_bytes(b'junk')
    with pytest.raises(CheckpointError, match='junk.ckpt: checkpoint is truncated'):
        load_checkpoint(path)


def test_check_compatible(trained_checkpoint):
    check_compatible(trained_checkpoint, 16)
    with pytest.raises(IncompatibleCheckpointError, match='trained at 16x16, dataset images are 32x32'):
        check_compatible(trained_checkpoint, 32)


def _raw_checkpoint(header, entries=()):
    body = json.dumps(header).encode('utf-8')
    parts = [MAGIC, struct.pack('<BI', FORMAT_VERSION, len(body)), body]
    parts.extend(_encode_entry(name, array) for name, array in entries)
    return b''.join(parts)


@pytest.fixture
def valid_header(tiny_model_config):
    return {
        'config': tiny_model_config.to_dict(), 'seed': 0, 'metadata': {}, 'n_state': 0,
        'n_entries': 0, 'optimizer': None,
    }


@pytest.mark.parametrize('changes,match', [
    ({'n_state': '3'}, 'entry counts'),
    ({'n_state': 2, 'n_entries': 1}, 'entry counts'),
    ({'config': []}, 'config and metadata must be objects'),
    ({'config': {'num_classes': 'two'}}, 'invalid model configuration'),
    ({'optimizer': [1]}, 'corrupt optimizer state'),
    ({'optimizer': {'momentum': 0.9}}, 'corrupt optimizer state'),
])
def test_malformed_header(valid_header, changes, match):
    header = {**valid_header, **changes}
    with pytest.raises(CheckpointError, match=match):
        decode(_raw_checkpoint(header))


def test_header_missing_fields(valid_header):
    with pytest.raises(CheckpointError, match='missing'):
        decode(_raw_checkpoint({}))
    del valid_header['n_entries']
    with pytest.raises(CheckpointError, match=r"missing \['n_entries'\]"):
        decode(_raw_checkpoint(valid_header))
    with pytest.raises(CheckpointError, match='not an object'):
        decode(_raw_checkpoint([]))


def test_malformed_optimizer_entry_name(valid_header):
    header = {**valid_header, 'n_entries': 1, 'optimizer': {'step': 1}}
    with pytest.raises(CheckpointError, match="'bogus' is not an optimizer moment entry"):
        decode(_raw_checkpoint(header, [('bogus', np.zeros(2))]))
