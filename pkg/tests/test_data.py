import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from rowcnn.data import (
    decode_idx,
    encode_idx,
    images_to_tensor,
    load_dataset,
    read_idx,
    synthetic_images,
    tile_images,
    write_dataset,
)
from rowcnn.errors import DataFormatError


def test_hand_built_ubyte_file():
    pixels = bytes(range(32))
    blob = struct.pack(">I", 0x00000803) + struct.pack(">III", 2, 4, 4) + pixels
    images = decode_idx(blob)
    assert images.shape == (2, 4, 4) and images.dtype == np.uint8
    x = images_to_tensor(images)
    assert x.shape == (2, 1, 4, 4)
    assert x[1, 0, 3, 3] == pytest.approx(31 / 255)


@pytest.mark.parametrize("blob", [
    b"\x01\x00\x08\x01" + b"\x00\x00\x00\x01" + b"\x00",  # nonzero leading bytes
    b"\x00\x00\x07\x01" + b"\x00\x00\x00\x01" + b"\x00",  # unknown type code
    b"\x00\x00",                                          # truncated magic
    b"\x00\x00\x08\x02" + b"\x00\x00\x00\x02",            # truncated header
    b"\x00\x00\x08\x01" + b"\x00\x00\x00\x03" + b"\x00",  # short payload
])
def test_malformed_idx_is_rejected(blob):
    with pytest.raises(DataFormatError):
        decode_idx(blob)


@settings(max_examples=60, deadline=None)
@given(arr=hnp.arrays(st.sampled_from([np.uint8, np.int8, np.int16, np.int32, np.float32, np.float64]),
                      hnp.array_shapes(min_dims=1, max_dims=4, max_side=5)))
def test_idx_round_trip(arr):
    out = decode_idx(encode_idx(arr))
    assert out.shape == arr.shape
    # byte comparison so NaN payloads count as equal
    assert out.astype(arr.dtype).tobytes() == arr.tobytes()


def test_unsupported_dtype():
    with pytest.raises(DataFormatError):
        encode_idx(np.zeros(3, dtype=np.complex128))


def test_synthetic_data_is_deterministic_and_balanced(tmp_path):
    a, la = synthetic_images(30, (1, 8, 8), 3, 5)
    b, lb = synthetic_images(30, (1, 8, 8), 3, 5)
    c, _ = synthetic_images(30, (1, 8, 8), 3, 6)
    assert a.tobytes() == b.tobytes() and la.tobytes() == lb.tobytes()
    assert a.tobytes() != c.tobytes()
    assert np.bincount(la).tolist() == [10, 10, 10]
    # the class shift makes class means strictly increase
    means = [a[la == k].mean() for k in range(3)]
    assert means[0] < means[1] < means[2]
    write_dataset(tmp_path / "one", a, la)
    write_dataset(tmp_path / "two", b, lb)
    for name in ("images.idx", "labels.idx"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_load_dataset_round_trip(tmp_path):
    images, labels = synthetic_images(6, (2, 4, 5), 2, 1)
    write_dataset(tmp_path, images, labels)
    x, y = load_dataset(tmp_path)
    assert x.shape == (6, 2, 4, 5)
    np.testing.assert_array_equal(x, images / 255.0)
    np.testing.assert_array_equal(y, labels)
    assert read_idx(tmp_path / "labels.idx").shape == (6,)


def test_label_count_mismatch(tmp_path):
    images, labels = synthetic_images(6, (1, 4, 4), 2, 1)
    write_dataset(tmp_path, images, labels[:5])
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path)


def test_tiling_repeats_blocks():
    images, _ = synthetic_images(2, (1, 3, 4), 2, 0)
    tiled = tile_images(images, 3)
    assert tiled.shape == (2, 1, 9, 12)
    assert np.array_equal(tiled[:, :, 3:6, 8:12], images)
