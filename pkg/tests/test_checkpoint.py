import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from procplan import checkpoint as ckpt

shapes = st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple)


@settings(max_examples=40)
@given(st.dictionaries(st.text("abc/_", min_size=1, max_size=8),
                       shapes.flatmap(lambda s: arrays(np.float64, s)), max_size=4))
def test_round_trip_bit_exact(tensors):
    header = {"a": 1, "b": [1.5, "x"]}
    h, out = ckpt.loads(ckpt.dumps(header, tensors))
    assert h == header
    assert set(out) == set(tensors)
    for k in tensors:
        assert out[k].shape == tensors[k].shape
        assert out[k].tobytes() == np.asarray(tensors[k], order="C").tobytes()


def test_dumps_is_deterministic():
    t = {"b": np.arange(3.0), "a": np.eye(2)}
    assert ckpt.dumps({"x": 1}, t) == ckpt.dumps({"x": 1}, dict(reversed(list(t.items()))))


def test_corruption_detected():
    blob = bytearray(ckpt.dumps({}, {"w": np.ones(4)}))
    blob[20] ^= 1
    with pytest.raises(ckpt.CheckpointError, match="checksum"):
        ckpt.loads(bytes(blob))
    with pytest.raises(ckpt.CheckpointError, match="magic"):
        ckpt.loads(b"XXXX" + bytes(blob[4:]))


def test_version_checked():
    import struct
    import zlib
    body = bytearray(ckpt.dumps({}, {})[:-4])
    body[4:8] = struct.pack("<I", 99)
    blob = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(ckpt.CheckpointError, match="version"):
        ckpt.loads(blob)


def test_save_load_file(tmp_path):
    path = tmp_path / "sub" / "m.ckpt"
    ckpt.save(path, {"k": 2}, {"w": np.array([1.0, 2.0])})
    h, t = ckpt.load(path)
    assert h == {"k": 2} and t["w"].tolist() == [1.0, 2.0]
    assert not path.with_suffix(".ckpt.tmp").exists()


def test_config_mismatch_names_fields():
    ckpt.check_config({"a": 1}, {"a": 1})
    with pytest.raises(ckpt.ConfigMismatch, match="d_model"):
        ckpt.check_config({"d_model": 32}, {"d_model": 64})
