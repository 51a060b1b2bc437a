from __future__ import annotations

import numpy as np
import numpy.testing as npt
import pytest

from seqloc.errors import CorruptDataset
from seqloc.formats import read_pgm, read_slfm, write_pgm, write_slfm


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(48, 64), dtype=np.uint8)
    path = tmp_path / "frame.pgm"
    write_pgm(path, img)
    npt.assert_array_equal(read_pgm(path), img)


def test_pgm_write_read_write_is_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(24, 32), dtype=np.uint8)
    a = tmp_path / "a.pgm"
    b = tmp_path / "b.pgm"
    write_pgm(a, img)
    write_pgm(b, read_pgm(a))
    assert a.read_bytes() == b.read_bytes()


def test_truncated_pgm_names_the_file(tmp_path):
    img = np.zeros((16, 16), dtype=np.uint8)
    path = tmp_path / "broken.pgm"
    write_pgm(path, img)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 40])
    with pytest.raises(CorruptDataset, match="broken.pgm"):
        read_pgm(path)


def test_pgm_rejects_bad_magic(tmp_path):
    path = tmp_path / "notpgm.pgm"
    path.write_bytes(b"P6\n2 2\n255\n" + bytes(12))
    with pytest.raises(CorruptDataset):
        read_pgm(path)


def test_slfm_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    arr = rng.standard_normal((12, 10, 7)).astype(np.float32)
    path = tmp_path / "map.slfm"
    write_slfm(path, arr)
    npt.assert_array_equal(read_slfm(path), arr)


def test_slfm_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.slfm"
    path.write_bytes(b"XXXX" + bytes(40))
    with pytest.raises(CorruptDataset):
        read_slfm(path)


def test_slfm_rejects_truncated_payload(tmp_path):
    rng = np.random.default_rng(3)
    arr = rng.standard_normal((6, 5, 3)).astype(np.float32)
    path = tmp_path / "short.slfm"
    write_slfm(path, arr)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(CorruptDataset):
        read_slfm(path)
