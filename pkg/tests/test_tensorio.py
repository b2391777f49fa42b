import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from meshrecover.tensorio import (TensorFormatError, decode_archive, decode_tensor, encode_archive,
                                  encode_tensor, read_any, write_archive, write_tensor)

dtypes = st.sampled_from([np.float32, np.float64, np.uint8])


@settings(max_examples=60, deadline=None)
@given(dtypes.flatmap(lambda dt: hnp.arrays(dt, hnp.array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5))))
def test_round_trip_is_identity(arr):
    out = decode_tensor(encode_tensor(arr))
    assert out.dtype == arr.dtype and out.shape == arr.shape
    assert out.tobytes() == arr.tobytes()


def test_header_layout():
    blob = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:8] == b"MRTENS01"
    assert struct.unpack_from("<IIII", blob, 8) == (2, 2, 3, 0)
    assert np.frombuffer(blob[24:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_bool_is_stored_as_u8():
    out = decode_tensor(encode_tensor(np.array([True, False])))
    assert out.dtype == np.uint8 and out.tolist() == [1, 0]


def test_empty_tensor_round_trip():
    out = decode_tensor(encode_tensor(np.zeros((0, 3))))
    assert out.shape == (0, 3)


def test_bad_magic_reports_offset_zero():
    blob = bytearray(encode_tensor(np.ones(3)))
    blob[0:8] = b"XXXXXXXX"
    with pytest.raises(TensorFormatError) as info:
        decode_tensor(bytes(blob))
    assert info.value.offset == 0


def test_truncated_payload():
    blob = encode_tensor(np.ones(10))
    with pytest.raises(TensorFormatError, match="payload truncated") as info:
        decode_tensor(blob[:-4])
    assert info.value.offset == len(blob) - 4


def test_trailing_bytes_rejected():
    with pytest.raises(TensorFormatError, match="trailing"):
        decode_tensor(encode_tensor(np.ones(2)) + b"\0")


def test_unknown_dtype_code():
    blob = bytearray(encode_tensor(np.ones(2)))
    struct.pack_into("<I", blob, 16, 9)
    with pytest.raises(TensorFormatError, match="dtype"):
        decode_tensor(bytes(blob))


def test_archive_round_trip(tmp_path):
    tensors = {"a": np.arange(4.0), "bé": np.ones((2, 2), np.float32), "m": np.array([1, 0], np.uint8)}
    write_archive(tmp_path / "x.tens", tensors)
    out = read_any(tmp_path / "x.tens")
    assert list(out) == list(tensors)
    for k in tensors:
        np.testing.assert_array_equal(out[k], tensors[k])


def test_archive_error_offset_points_inside_entry():
    blob = bytearray(encode_archive({"a": np.ones(2)}))
    entry_start = 12 + 4 + 1 + 4
    blob[entry_start:entry_start + 8] = b"BADMAGIC"
    with pytest.raises(TensorFormatError) as info:
        decode_archive(bytes(blob))
    assert info.value.offset == entry_start


def test_read_any_single(tmp_path):
    write_tensor(tmp_path / "t.tens", np.eye(2))
    np.testing.assert_array_equal(read_any(tmp_path / "t.tens"), np.eye(2))
