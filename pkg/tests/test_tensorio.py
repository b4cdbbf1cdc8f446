import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from stket import tensorio
from stket.tensorio import TensorFormatError


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(st.sampled_from([np.float64, np.float32]), hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_encode_decode_round_trip(arr):
    out, end = tensorio.decode(tensorio.encode(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    np.testing.assert_array_equal(out, arr)
    assert end == len(tensorio.encode(arr))


def test_many_records_share_a_file(tmp_path, rng):
    arrays = [rng.normal(size=(3, 2)), rng.normal(size=5).astype(np.float32), np.zeros((0, 4))]
    offsets = tensorio.save_tensors(tmp_path / "x.stkt", arrays)
    read = tensorio.TensorReader(tmp_path)
    for a, off in zip(arrays, offsets):
        np.testing.assert_array_equal(read(f"x.stkt#{off}"), a)
    assert len(tensorio.load_all(tmp_path / "x.stkt")) == 3


def test_payload_is_little_endian():
    buf = tensorio.encode(np.array([1.0]))
    assert buf[:4] == b"STKT"
    assert struct.unpack("<d", buf[-8:])[0] == 1.0


@pytest.mark.parametrize("mutate, match", [
    (lambda b: b"XXXX" + b[4:], "magic"),
    (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
    (lambda b: b[:8] + bytes([7]) + b[9:], "dtype"),
    (lambda b: b[:-3], "truncat"),
])
def test_corrupt_records_are_rejected(mutate, match):
    buf = tensorio.encode(np.arange(4.0))
    with pytest.raises(TensorFormatError, match=match):
        tensorio.decode(mutate(buf))


def test_bad_reference():
    with pytest.raises(TensorFormatError):
        tensorio.parse_ref("file-without-offset")


def test_write_returns_offsets():
    fh = io.BytesIO()
    a = tensorio.write_tensor(fh, np.ones(2))
    b = tensorio.write_tensor(fh, np.ones(3))
    assert a == 0 and b == len(tensorio.encode(np.ones(2)))
