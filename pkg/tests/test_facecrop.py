import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvhuman.body import ViewLayout
from mvhuman.errors import DetectionError, ShapeError, ValidationError
from mvhuman.facecrop import (FaceBox, GroundTruthProvider, bicubic_matrix, crop_and_upscale, crop_region,
                              detect_face, feather_mask, paste_back, resize, select_face_views)


def keys_kernel(x, a=-0.5):
    x = abs(x)
    if x <= 1:
        return (a + 2) * x**3 - (a + 3) * x**2 + 1
    if x < 2:
        return a * x**3 - 5 * a * x**2 + 8 * a * x - 4 * a
    return 0.0


def loop_upscale_1d(signal, n_out):
    """Scalar-loop bicubic upscaling with edge replication."""
    n_in = len(signal)
    out = []
    for i in range(n_out):
        src = (i + 0.5) * n_in / n_out - 0.5
        acc = wsum = 0.0
        for k in range(int(np.floor(src)) - 1, int(np.floor(src)) + 3):
            w = keys_kernel(src - k)
            acc += w * signal[min(max(k, 0), n_in - 1)]
            wsum += w
        out.append(acc / wsum)
    return np.array(out)


@pytest.mark.parametrize("n_in,n_out", [(5, 11), (8, 32), (13, 32)])
def test_upscale_matches_scalar_loop(n_in, n_out):
    rng = np.random.default_rng(n_in)
    s = rng.random(n_in)
    assert np.abs(bicubic_matrix(n_in, n_out) @ s - loop_upscale_1d(s, n_out)).max() < 1e-12


@given(st.integers(2, 40), st.integers(2, 40))
@settings(max_examples=40, deadline=None)
def test_resampling_rows_sum_to_one(n_in, n_out):
    assert np.allclose(bicubic_matrix(n_in, n_out).sum(1), 1.0)


@given(st.integers(3, 20), st.integers(3, 20), st.floats(0, 1))
@settings(max_examples=30, deadline=None)
def test_resize_preserves_constants(h, w, c):
    out = resize(np.full((7, 9, 3), c), h, w)
    assert out.shape == (h, w, 3) and np.abs(out - c).max() < 1e-12


def test_resize_identity_is_copy():
    img = np.random.default_rng(0).random((6, 6, 3))
    out = resize(img, 6, 6)
    assert np.array_equal(out, img) and out is not img


def test_detect_tie_break_order():
    a = FaceBox(2, 2, 4, 4, 0.9)
    b = FaceBox(1, 1, 6, 6, 0.9)
    c = FaceBox(0, 1, 6, 6, 0.9)
    d = FaceBox(0, 0, 2, 2, 0.95)
    img = np.zeros((16, 16, 3))
    assert detect_face(img, GroundTruthProvider([a, b, c, d])) == d
    assert detect_face(img, GroundTruthProvider([a, b, c])) == c
    assert detect_face(img, GroundTruthProvider([])) is None


def test_detect_wraps_provider_failures():
    def broken(_):
        raise RuntimeError("boom")

    with pytest.raises(DetectionError):
        detect_face(np.zeros((8, 8, 3)), broken)


def test_box_validation_and_round_trip():
    with pytest.raises(ValidationError):
        FaceBox(30, 0, 4, 4).validate(32, 32)
    with pytest.raises(ValidationError):
        FaceBox(0, 0, 0, 4).validate(32, 32)
    with pytest.raises(ValidationError):
        FaceBox(0, 0, 4, 4, confidence=1.5).validate(32, 32)
    b = FaceBox(1, 2, 3, 4, 0.5, "test")
    assert FaceBox.from_dict(b.to_dict()) == b


def test_crop_region_is_clamped_inside():
    x0, y0, side = crop_region(FaceBox(0, 0, 6, 6), 32, 32)
    assert (x0, y0) == (0, 0) and side == 8
    x0, y0, side = crop_region(FaceBox(28, 28, 4, 4), 32, 32)
    assert x0 + side <= 32 and y0 + side <= 32


def test_feather_mask_profile():
    box = FaceBox(4, 4, 12, 12)
    m = feather_mask(box, (2, 2, 16), ramp=3)
    assert m[0, 0] == 0.0  # outside the box
    assert m[2, 2] == pytest.approx(0.25)  # box edge
    assert m[5, 5] == 1.0  # ramp + 1 pixels inside
    assert m.max() == 1.0 and m.min() == 0.0


@given(st.integers(0, 20), st.integers(0, 20), st.integers(4, 10), st.integers(4, 10), st.integers(0, 3))
@settings(max_examples=40, deadline=None)
def test_paste_back_only_touches_the_box(x, y, w, h, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((32, 32, 3))
    box = FaceBox(x, y, w, h)
    crop = crop_and_upscale(img, box, 16)
    out = paste_back(img, rng.random((16, 16, 3)), crop)
    outside = np.ones((32, 32), bool)
    outside[y : y + h, x : x + w] = False
    assert np.array_equal(out[outside], img[outside])


def test_paste_back_of_untouched_upscaled_crop_is_near_identity():
    rng = np.random.default_rng(0)
    img = rng.random((32, 32, 3))
    crop = crop_and_upscale(img, FaceBox(10, 8, 10, 10), 32)
    out = paste_back(img, crop.image, crop)
    assert np.abs(out - img).max() < 1e-9
    again = paste_back(out, crop.image, crop)
    assert np.abs(again - out).max() < 1e-9


def test_paste_back_blends_by_the_mask():
    img = np.zeros((32, 32, 3))
    crop = crop_and_upscale(img, FaceBox(8, 8, 12, 12), 16)
    out = paste_back(img, np.ones((16, 16, 3)), crop)
    x0, y0, side = crop.region
    assert np.allclose(out[y0 : y0 + side, x0 : x0 + side, 0], crop.mask)
    with pytest.raises(ShapeError):
        paste_back(img, np.ones((8, 8, 3)), crop)


def test_select_face_views():
    assert select_face_views() == (0, 5, 1)
    assert select_face_views(ViewLayout((45.0, 0.0, -45.0, 180.0))) == (1, 2, 0)
    with pytest.raises(ValidationError):
        select_face_views(ViewLayout((0.0, 90.0, 180.0, 270.0)))
