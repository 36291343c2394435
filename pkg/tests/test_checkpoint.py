import numpy as np
import pytest

from mad import checkpoint
from mad.errors import FormatError


def test_roundtrip_and_order(tmp_path):
    t = {"b": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.float32([1.5])}
    blob = checkpoint.encode_tensors(t)
    # names are stored sorted, so dict order never changes the bytes
    assert blob == checkpoint.encode_tensors(dict(reversed(list(t.items()))))
    back = checkpoint.decode_tensors(blob)
    assert list(back) == ["a", "b"]
    assert all(np.array_equal(back[k], t[k]) for k in t)
    checkpoint.save(tmp_path / "c.madc", t, {"x": 1})
    got, meta = checkpoint.load(tmp_path / "c.madc")
    assert meta == {"x": 1} and np.array_equal(got["b"], t["b"])


def test_layout_header():
    blob = checkpoint.encode_tensors({"w": np.zeros((1, 2), np.float32)})
    assert blob[:4] == b"MADC"
    assert blob[4:12] == b"\x01\x00\x00\x00\x01\x00\x00\x00"
    # u16 len, name, u8 ndim, 2 x u32 dims, 2 x f32
    assert len(blob) == 12 + 2 + 1 + 1 + 8 + 8


@pytest.mark.parametrize("cut", [3, 10, 20])
def test_corrupt(cut):
    blob = checkpoint.encode_tensors({"w": np.ones((2, 2), np.float32)})
    with pytest.raises(FormatError):
        checkpoint.decode_tensors(blob[:cut])


def test_trailing_and_missing(tmp_path):
    blob = checkpoint.encode_tensors({"w": np.ones(2, np.float32)})
    with pytest.raises(FormatError, match="trailing"):
        checkpoint.decode_tensors(blob + b"\x00")
    with pytest.raises(FormatError, match="not found"):
        checkpoint.load(tmp_path / "nope.madc")
