"""Tests for the planar image type, window primitives and PNG I/O."""
import logging
from pathlib import Path

import cv2
import numpy as np
import pytest

from hazeforge.imgcore import (
    ImageError, PlanarImage, WindowSpec, box_filter, box_mean, box_mean_adjoint,
    from_uint8, luminance, min_channel, read_image, to_uint8, window_extremum, write_image,
)


def _rand(shape, seed=0) -> np.ndarray:
    return np.random.default_rng(seed).random(shape)


def _brute(a: np.ndarray, r: int, reduce) -> np.ndarray:
    # clipped-window reference, one pixel at a time
    h, w = a.shape
    out = np.empty_like(a)
    for y in range(h):
        for x in range(w):
            out[y, x] = reduce(a[max(0, y - r):y + r + 1, max(0, x - r):x + r + 1])
    return out


# --- PlanarImage ---

def test_2d_array_becomes_single_channel() -> None:
    img = PlanarImage(np.zeros((4, 5)))
    assert img.shape == (1, 4, 5)
    assert (img.width, img.height, img.channels) == (5, 4, 1)


@pytest.mark.parametrize("bad", [np.zeros((3, 0, 4)), np.zeros((4, 2, 2)), np.zeros(5)])
def test_bad_shapes_rejected(bad) -> None:
    with pytest.raises(ImageError):
        PlanarImage(bad)


def test_nan_rejected() -> None:
    data = np.zeros((3, 2, 2))
    data[1, 0, 0] = np.nan
    with pytest.raises(ImageError, match="NaN"):
        PlanarImage(data)


def test_data_is_read_only_copy() -> None:
    src = np.zeros((3, 2, 2))
    img = PlanarImage(src)
    src[0, 0, 0] = 1.0
    assert img.data[0, 0, 0] == 0.0
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0


def test_negative_window_radius() -> None:
    with pytest.raises(ValueError):
        WindowSpec(-1)


# --- box filter / extremum ---

def test_box_filter_constant_is_fixed_point_at_edges() -> None:
    img = PlanarImage(np.full((3, 9, 7), 0.37))
    out = box_filter(img, WindowSpec(3))
    np.testing.assert_allclose(out.data, 0.37, atol=1e-12)


def test_box_filter_radius_zero_is_identity() -> None:
    img = PlanarImage(_rand((3, 6, 5)))
    np.testing.assert_array_equal(box_filter(img, 0).data, img.data)


def test_box_filter_matches_clipped_mean() -> None:
    a = _rand((7, 9), seed=1)
    out = box_filter(PlanarImage(a), 2).data[0]
    np.testing.assert_allclose(out, _brute(a, 2, np.mean), atol=1e-12)


def test_box_filter_radius_larger_than_image() -> None:
    a = _rand((3, 4), seed=2)
    out = box_filter(PlanarImage(a), 10).data[0]
    np.testing.assert_allclose(out, a.mean(), atol=1e-12)


@pytest.mark.parametrize("mode,reduce", [("min", np.min), ("max", np.max)])
def test_window_extremum_matches_clipped_window(mode, reduce) -> None:
    a = _rand((8, 6), seed=3)
    out = window_extremum(PlanarImage(a), 2, mode).data[0]
    np.testing.assert_array_equal(out, _brute(a, 2, reduce))


def test_window_extremum_bad_mode() -> None:
    with pytest.raises(ValueError, match="mode"):
        window_extremum(PlanarImage(np.zeros((2, 2))), 1, "median")


def test_box_mean_adjoint_dot_product() -> None:
    x, y = _rand((9, 11), seed=4), _rand((9, 11), seed=5)
    lhs = np.sum(box_mean(x, 3) * y)
    rhs = np.sum(x * box_mean_adjoint(y, 3))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_min_channel_and_luminance() -> None:
    data = np.stack([np.full((2, 2), 0.2), np.full((2, 2), 0.5), np.full((2, 2), 1.0)])
    img = PlanarImage(data)
    np.testing.assert_allclose(min_channel(img).data, 0.2)
    np.testing.assert_allclose(luminance(img).data, 0.299 * 0.2 + 0.587 * 0.5 + 0.114)


def test_min_channel_needs_rgb() -> None:
    with pytest.raises(ImageError):
        min_channel(PlanarImage(np.zeros((2, 2))))


# --- 8-bit conversion and files ---

def test_to_uint8_clamps_and_rounds() -> None:
    img = PlanarImage(np.array([[0.0, 0.5, 1.0, 1.2, -0.1]]))
    assert to_uint8(img).tolist() == [[0, 128, 255, 255, 0]]


def test_png_roundtrip_rgb(tmp_path: Path) -> None:
    raw = np.random.default_rng(6).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    img = from_uint8(raw)
    write_image(img, tmp_path / "a.png")
    back = read_image(tmp_path / "a.png")
    np.testing.assert_array_equal(to_uint8(back), raw)


def test_png_roundtrip_gray(tmp_path: Path) -> None:
    raw = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    write_image(from_uint8(raw), tmp_path / "sub" / "g.png")
    back = read_image(tmp_path / "sub" / "g.png")
    assert back.channels == 1
    np.testing.assert_array_equal(to_uint8(back), raw)


def test_rgb_channel_order_kept(tmp_path: Path) -> None:
    data = np.zeros((3, 2, 2))
    data[0] = 1.0   # pure red
    write_image(PlanarImage(data), tmp_path / "red.png")
    bgr = cv2.imread(str(tmp_path / "red.png"))
    assert bgr[0, 0].tolist() == [0, 0, 255]
    np.testing.assert_array_equal(read_image(tmp_path / "red.png").data, data)


def test_alpha_dropped_with_warning(tmp_path: Path, caplog) -> None:
    bgra = np.zeros((2, 3, 4), dtype=np.uint8)
    bgra[..., 2] = 255
    bgra[..., 3] = 10
    cv2.imwrite(str(tmp_path / "alpha.png"), bgra)
    with caplog.at_level(logging.WARNING):
        img = read_image(tmp_path / "alpha.png")
    assert img.channels == 3
    np.testing.assert_array_equal(img.data[0], 1.0)
    assert "alpha" in caplog.text


def test_16bit_rejected(tmp_path: Path) -> None:
    cv2.imwrite(str(tmp_path / "deep.png"), np.full((2, 2), 1000, dtype=np.uint16))
    with pytest.raises(ImageError, match="8-bit"):
        read_image(tmp_path / "deep.png")


def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ImageError, match="cannot read"):
        read_image(tmp_path / "nope.png")


def test_two_channel_cannot_be_written(tmp_path: Path) -> None:
    with pytest.raises(ImageError):
        write_image(PlanarImage(np.zeros((2, 3, 3))), tmp_path / "g.png")
