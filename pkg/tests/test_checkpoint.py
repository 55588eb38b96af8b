import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from structinbet.checkpoint import CheckpointError, dumps, load, loads, save


def test_layout_of_single_tensor():
    buf = dumps({"w": np.array([[1.0, 2.0]], dtype=np.float32)})
    assert buf[:4] == b"SINB"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<H", buf, 12) == (1,)
    assert buf[14:15] == b"w"
    assert buf[15] == 2
    assert struct.unpack_from("<II", buf, 16) == (1, 2)
    assert struct.unpack_from("<2f", buf, 24) == (1.0, 2.0)
    assert len(buf) == 32


def test_roundtrip_file(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.b": rng.normal(size=(2, 3, 4)).astype(np.float32), "scalar": np.float32(3.5),
               "empty": np.zeros((0, 3), dtype=np.float32), "ünï": np.ones(2, dtype=np.float32)}
    save(tmp_path / "x.sinb", tensors)
    back = load(tmp_path / "x.sinb")
    assert list(back) == list(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k]) and back[k].dtype == np.float32


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(arr):
    back = loads(dumps({"t": arr}))["t"]
    assert back.shape == arr.shape and np.array_equal(back, arr)


def test_corruption_detected():
    buf = dumps({"w": np.ones((2, 2), dtype=np.float32)})
    with pytest.raises(CheckpointError):
        loads(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        loads(buf[:-3])
    with pytest.raises(CheckpointError):
        loads(buf + b"\0")
    with pytest.raises(CheckpointError):
        loads(buf[:4] + struct.pack("<II", 2, 1) + buf[12:])
    one = dumps({"w": np.ones(1, dtype=np.float32)})
    dup = one[:4] + struct.pack("<II", 1, 2) + one[12:] + one[12:]
    with pytest.raises(CheckpointError):
        loads(dup)
