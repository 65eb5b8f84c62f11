import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vdrive import vdtn


def test_header_layout():
    buf = vdtn.dumps(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"VDTN"
    assert buf[4:8] == bytes([1, 0, 2, 0])
    assert struct.unpack("<2Q", buf[8:24]) == (2, 3)
    assert np.frombuffer(buf[24:], dtype="<f4").tolist() == [0, 1, 2, 3, 4, 5]


@pytest.mark.parametrize("shape", [(1,), (7,), (1, 1), (3, 1, 2), (0,), (2, 0, 3), ()])
def test_edge_dims(shape, tmp_path):
    a = np.random.default_rng(0).normal(size=shape).astype(np.float32)
    vdtn.write(tmp_path / "t.vdtn", a)
    b = vdtn.read(tmp_path / "t.vdtn")
    assert b.shape == a.shape and b.dtype == np.float32
    assert a.tobytes() == b.tobytes()


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=4, min_side=1, max_side=5),
                  elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_roundtrip_bit_exact(a):
    b = vdtn.loads(vdtn.dumps(a))
    assert b.shape == a.shape
    assert a.tobytes() == b.tobytes()


def test_rejects_other_dtypes():
    with pytest.raises(vdtn.FormatError):
        vdtn.dumps(np.zeros(3, dtype=np.float64))


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + bytes([2]) + b[5:],
    lambda b: b[:5] + bytes([1]) + b[6:],
    lambda b: b[:7] + bytes([9]) + b[8:],
    lambda b: b[:-1],
    lambda b: b[:12],
])
def test_corrupt_headers_rejected(mutate):
    good = vdtn.dumps(np.ones((2, 2), dtype=np.float32))
    with pytest.raises(vdtn.FormatError):
        vdtn.loads(mutate(good))


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"enc.0.W": np.ones((3, 2), np.float32), "codes": np.arange(4, dtype=np.float32)}
    vdtn.save_checkpoint(tmp_path / "ck", tensors, {"kind": "x", "step": 3})
    got, meta = vdtn.load_checkpoint(tmp_path / "ck")
    assert meta == {"kind": "x", "step": 3}
    assert set(got) == set(tensors)
    for k in tensors:
        assert got[k].tobytes() == tensors[k].tobytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        vdtn.load_checkpoint(tmp_path / "nope")
