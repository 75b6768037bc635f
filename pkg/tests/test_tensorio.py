"""Tensor container format and checkpoint archive round trips."""

import struct

import numpy as np
import pytest

from bichange.tensorio import (
    load_archive, save_archive, tensor_from_bytes, tensor_to_bytes,
    load_tensor, save_tensor,
)


def test_container_layout():
    arr = np.arange(6.0).reshape(2, 3)
    data = tensor_to_bytes(arr)
    assert data[:4] == b"S2CT"
    version, rank = struct.unpack_from("<HH", data, 4)
    assert (version, rank) == (1, 2)
    assert struct.unpack_from("<2Q", data, 8) == (2, 3)
    assert len(data) == 8 + 16 + 6 * 8


def test_round_trip():
    rng = np.random.default_rng(0)
    for shape in [(), (4,), (2, 3), (3, 2, 2, 1)]:
        arr = rng.normal(size=shape)
        back = tensor_from_bytes(tensor_to_bytes(arr))
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


def test_file_round_trip(tmp_path):
    arr = np.random.default_rng(1).normal(size=(3, 5))
    path = tmp_path / "t.s2ct"
    save_tensor(path, arr)
    np.testing.assert_array_equal(load_tensor(path), arr)


def test_bad_magic_rejected():
    with pytest.raises(ValueError, match="magic"):
        tensor_from_bytes(b"NOPE" + b"\x00" * 32)


def test_archive_round_trip_and_validation(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"a.w": rng.normal(size=(2, 3)), "a.b": rng.normal(size=3)}
    path = tmp_path / "ckpt.zip"
    save_archive(path, tensors, {"config": {"kind": "demo"}})
    loaded, manifest = load_archive(path, {"a.w": (2, 3), "a.b": (3,)})
    np.testing.assert_array_equal(loaded["a.w"], tensors["a.w"])
    assert manifest["config"] == {"kind": "demo"}

    with pytest.raises(ValueError, match="mismatch"):
        load_archive(path, {"a.w": (2, 3)})
    with pytest.raises(ValueError, match="shape"):
        load_archive(path, {"a.w": (3, 2), "a.b": (3,)})


def test_archive_bytes_deterministic(tmp_path):
    tensors = {"x": np.arange(4.0)}
    p1, p2 = tmp_path / "a.zip", tmp_path / "b.zip"
    save_archive(p1, tensors, {"seed": 7})
    save_archive(p2, tensors, {"seed": 7})
    assert p1.read_bytes() == p2.read_bytes()
