from fractions import Fraction

import numpy as np
import pytest
from PIL import Image

from renalparse.render import COLORS, overlay_slice, render_overlay
from renalparse.volgrid import ClassId, LabelMap, Volume


def _case():
    # intensities 0..255 with min 0 and max 255, so gray levels are integers
    data = (np.arange(6 * 7 * 8) % 256).reshape(6, 7, 8).astype(np.float32)
    data[0, 0, 0], data[-1, -1, -1] = 0, 255
    rng = np.random.default_rng(3)
    labels = rng.integers(0, 5, data.shape).astype(np.uint8)
    return Volume(data), LabelMap(labels)


def _expected_pixel(gray, cls):
    if cls == 0:
        return (gray,) * 3
    # (0.6 g + 0.4 c) == (3 g + 2 c) / 5 has no .5 ties for integer g, c
    return tuple(round(Fraction(3 * gray + 2 * c, 5)) for c in COLORS[ClassId(cls)])


@pytest.mark.parametrize("axis", [0, 1, 2])
def test_overlay_matches_blend_oracle(axis):
    image, labels = _case()
    idx = 3
    rgb = overlay_slice(image, labels, axis, idx)
    img2d = np.take(image.data, idx, axis=axis)
    lab2d = np.take(labels.data, idx, axis=axis)
    assert rgb.shape == img2d.shape + (3,) and rgb.dtype == np.uint8
    for pos in np.ndindex(img2d.shape):
        assert tuple(rgb[pos]) == _expected_pixel(int(img2d[pos]), int(lab2d[pos])), pos


def test_colour_coding():
    assert COLORS[ClassId.KIDNEY] == (255, 255, 0)
    assert COLORS[ClassId.TUMOR] == (0, 0, 255)
    assert COLORS[ClassId.VEIN] == (0, 255, 0)
    assert COLORS[ClassId.ARTERY] == (255, 0, 0)


def test_png_roundtrip(tmp_path):
    image, labels = _case()
    out = tmp_path / "s.png"
    render_overlay(image, labels, 2, 4, out)
    with Image.open(out) as im:
        assert im.mode == "RGB"
        np.testing.assert_array_equal(np.asarray(im), overlay_slice(image, labels, 2, 4))


def test_constant_image_is_black_outside_labels():
    v = Volume(np.full((4, 4, 4), 7.0, np.float32))
    rgb = overlay_slice(v, LabelMap(np.zeros((4, 4, 4), np.uint8)), 0, 0)
    assert not rgb.any()


@pytest.mark.parametrize("idx", [-1, 8])
def test_slice_out_of_range(idx):
    image, labels = _case()
    with pytest.raises(IndexError):
        overlay_slice(image, labels, 2, idx)


def test_bad_inputs():
    image, labels = _case()
    with pytest.raises(ValueError):
        overlay_slice(image, LabelMap(np.zeros((6, 7, 9), np.uint8)), 2, 0)
    with pytest.raises(ValueError):
        overlay_slice(image, labels, 3, 0)
