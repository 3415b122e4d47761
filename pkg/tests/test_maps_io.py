import imageio.v2 as imageio
import numpy as np
import pytest

from core.maps_io import read_labels, read_pfm, write_labels, write_map, write_pfm
from core.validator import DataError


def test_pfm_keeps_top_row_first(tmp_path):
    image = np.zeros((3, 4, 3))
    image[0, 0] = [1.0, 0.5, 0.25]
    image[2, 3] = [0.125, 0.0, 2.0]
    path = tmp_path / "map.pfm"
    write_pfm(path, image)
    assert path.read_bytes().startswith(b"PF\n4 3\n-1.0\n")
    assert np.array_equal(read_pfm(path), image)


def test_single_channel_pfm(tmp_path):
    image = np.arange(6, dtype=np.float64).reshape(2, 3, 1) / 8.0
    path = tmp_path / "gray.pfm"
    write_pfm(path, image)
    assert path.read_bytes().startswith(b"Pf")
    assert np.array_equal(read_pfm(path), image)


def test_big_endian_pfm(tmp_path):
    image = np.array([[[0.5], [1.5]]])
    path = tmp_path / "be.pfm"
    path.write_bytes(b"Pf\n2 1\n1.0\n" + image[::-1].astype(">f4").tobytes())
    assert np.array_equal(read_pfm(path), image)


def test_truncated_pfm(tmp_path):
    path = tmp_path / "short.pfm"
    path.write_bytes(b"PF\n4 4\n-1.0\n" + b"\x00" * 10)
    with pytest.raises(DataError, match="truncated"):
        read_pfm(path)


def test_not_a_pfm(tmp_path):
    path = tmp_path / "x.pfm"
    path.write_bytes(b"P6\n1 1\n255\n\x00\x00\x00")
    with pytest.raises(DataError):
        read_pfm(path)


def test_write_map_adds_preview(tmp_path):
    path = tmp_path / "frame_0_color.pfm"
    write_map(path, np.full((2, 2, 3), 0.5))
    preview = imageio.imread(tmp_path / "frame_0_color.png")
    assert preview.shape == (2, 2, 3)
    assert preview[0, 0, 0] == round(0.5 ** (1 / 2.2) * 255)


def test_labels_are_sixteen_bit(tmp_path):
    labels = np.array([[0, 1], [300, 65535]])
    path = tmp_path / "regions.png"
    write_labels(path, labels)
    assert np.array_equal(read_labels(path), labels)
    with pytest.raises(DataError):
        write_labels(tmp_path / "neg.png", np.array([[-1]]))
