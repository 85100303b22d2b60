import numpy as np
import pytest

from nmdetect.checkpoint import load_checkpoint, save_checkpoint
from nmdetect.envelope import *
from nmdetect.model import build_convnet4, forward
from nmdetect.nmd import reference_from_bn, save_reference


def sample_envelope():
    env = Envelope(FileKind.refs)
    env.add(b'TEST', 'floats', np.arange(6, dtype=np.float64).reshape(2, 3))
    env.add(b'TEST', 'singles', np.array([1.5, -2.5], dtype=np.float32))
    env.add(b'TEST', 'ints', np.array([7, -1]))
    env.add(b'TEST', 'scalar', np.array(3.25))
    return env


def test_header_layout():
    buf = sample_envelope().serialise()
    assert buf[:4] == b'NMDK'
    assert buf[4:8] == b'\x01\0\0\0'
    assert buf[8:12] == b'REFS'
    assert buf[12:16] == b'\x04\0\0\0'


def test_roundtrip():
    env = sample_envelope()
    parsed = Envelope.from_buffer(env.serialise())
    assert parsed.kind is FileKind.refs
    assert [r.name for r in parsed.records] == ['floats', 'singles', 'ints', 'scalar']
    for orig, new in zip(env.records, parsed.records):
        assert new.tag == orig.tag
        assert new.data.dtype == orig.data.dtype
        assert new.data.shape == orig.data.shape
        assert (new.data == orig.data).all()
    assert 'ints' in parsed
    assert parsed['singles'][1] == -2.5


def test_bad_magic():
    buf = bytearray(sample_envelope().serialise())
    buf[0:4] = b'XXXX'
    with pytest.raises(EnvelopeError, match='bad magic'):
        Envelope.from_buffer(bytes(buf))


def test_version_mismatch():
    buf = bytearray(sample_envelope().serialise())
    buf[4] = 2
    with pytest.raises(EnvelopeError, match='unsupported format version'):
        Envelope.from_buffer(bytes(buf))


@pytest.mark.parametrize('cut', [3, 10, 20, 30, 60, -1])
def test_truncated(cut):
    buf = sample_envelope().serialise()
    with pytest.raises(EnvelopeError):
        Envelope.from_buffer(buf[:cut])


def test_trailing_bytes():
    with pytest.raises(EnvelopeError):
        Envelope.from_buffer(sample_envelope().serialise() + b'\0')


def test_record_name_not_utf8():
    buf = bytearray(sample_envelope().serialise())
    i = buf.index(b'floats')
    buf[i] = 0xff
    with pytest.raises(EnvelopeError, match='UTF-8'):
        Envelope.from_buffer(bytes(buf))


def test_wrong_kind():
    buf = sample_envelope().serialise()
    with pytest.raises(EnvelopeError, match='expected a MODL file'):
        Envelope.from_buffer(buf, FileKind.model)


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        Record(b'TEST', 'x', np.array([1, 2], dtype=np.uint8))
    with pytest.raises(ValueError):
        Record(b'TOOLONG', 'x', np.zeros(1))


def test_checkpoint_roundtrip(tmp_path, trained_model):
    path = tmp_path / 'model.nmdk'
    save_checkpoint(trained_model, path)
    loaded = load_checkpoint(path)
    state = trained_model.state()
    assert loaded.state().keys() == state.keys()
    for k, v in loaded.state().items():
        assert v.dtype == state[k].dtype
        assert (v == state[k]).all(), k
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32))
    assert (forward(loaded, x) == forward(trained_model, x)).all()
    assert loaded.blocks[1].conv.stride == 2
    assert loaded.blocks[0].bn.momentum == 0.99


def test_checkpoint_corrupt(tmp_path):
    path = tmp_path / 'model.nmdk'
    save_checkpoint(build_convnet4(num_classes=3, width=4), path)
    data = path.read_bytes()

    path.write_bytes(b'JUNK' + data[4:])
    with pytest.raises(EnvelopeError, match='bad magic'):
        load_checkpoint(path)

    path.write_bytes(data[:len(data) // 2])
    with pytest.raises(EnvelopeError, match='truncated'):
        load_checkpoint(path)


def test_checkpoint_rejects_other_kinds(tmp_path):
    path = tmp_path / 'refs.nmdk'
    save_reference(reference_from_bn(build_convnet4(num_classes=3, width=4)), path)
    with pytest.raises(EnvelopeError):
        load_checkpoint(path)
