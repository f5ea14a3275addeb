import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from conceptfuse.core import vtf
from conceptfuse.core.vtf import VTFError


def test_header_layout():
    buf = vtf.dumps(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == b"VTF1"
    assert struct.unpack("<III", buf[4:16]) == (2, 2, 3)
    assert len(buf) == 16 + 6 * 4
    assert np.frombuffer(buf[16:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip(arr):
    back = vtf.loads(vtf.dumps(arr))
    assert back.shape == arr.shape
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_file_roundtrip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    vtf.save(tmp_path / "x.vtf", arr)
    np.testing.assert_array_equal(vtf.load(tmp_path / "x.vtf"), arr)


def test_bad_magic():
    with pytest.raises(VTFError):
        vtf.loads(b"NOPE" + bytes(8))


def test_truncated_payload():
    buf = vtf.dumps(np.ones((2, 2), np.float32))
    with pytest.raises(VTFError):
        vtf.loads(buf[:-4])
    with pytest.raises(VTFError):
        vtf.loads(buf[:10])


def test_refuses_non_finite():
    with pytest.raises(VTFError):
        vtf.dumps(np.array([1.0, np.nan], np.float32))
