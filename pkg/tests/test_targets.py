import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from svhscore import _kernels
from svhscore.errors import InvalidConfig, MissingScore
from svhscore.records import AnnotatedImage, Joint
from svhscore.schema import Limb, Side
from svhscore.targets import (
    MaskConfig,
    SmoothingConfig,
    build_mask,
    build_pixel_targets,
    erosion_target,
    export_mask_png,
    fractional_target,
    smooth_label,
)

IGNORE = _kernels.IGNORE


def brute_mask(centers, r, R, h, w, background=21):
    """Straight transcription of the rule, one pixel at a time."""
    out = np.empty((h, w), dtype=np.int64)
    for y in range(h):
        for x in range(w):
            best, best_id = math.inf, None
            for type_id, cx, cy in sorted(centers):
                d = math.hypot(x - cx, y - cy)
                if d < best:
                    best, best_id = d, type_id
            if best <= r:
                out[y, x] = best_id
            elif best > R:
                out[y, x] = background
            else:
                out[y, x] = IGNORE
    return out


centers_st = st.lists(
    st.tuples(st.integers(0, 20), st.floats(0, 23), st.floats(0, 19)),
    min_size=1,
    max_size=6,
    unique_by=lambda c: c[0],
)


@settings(max_examples=60, deadline=None)
@given(centers_st, st.floats(0, 12), st.floats(0, 8))
@example([(0, 0.0, 2.2257433777591653e-204)], 0.0, 0.0)  # squared offset underflows
def test_mask_matches_brute_force(centers, r, extra):
    cfg = MaskConfig(r, r + extra)
    got = build_mask(centers, cfg, 20, 24)
    assert np.array_equal(got, brute_mask(centers, cfg.r, cfg.R, 20, 24))


@settings(max_examples=30, deadline=None)
@given(centers_st, st.floats(0, 12), st.floats(0, 8))
def test_mask_backends_agree(centers, r, extra):
    if _kernels.numba_impl is None:
        pytest.skip("numba unavailable")
    ordered = sorted(centers)
    ids = np.array([c[0] for c in ordered])
    cx = np.array([c[1] for c in ordered])
    cy = np.array([c[2] for c in ordered])
    a = _kernels.numpy_impl.nearest_labels(cx, cy, ids, r, r + extra, 20, 24, 21)
    b = _kernels.numba_impl.nearest_labels(cx, cy, ids, r, r + extra, 20, 24, 21)
    assert np.array_equal(a, b)


def test_mask_tie_goes_to_lowest_id():
    # pixel (5, 5) is exactly 3 px from both centers
    seg = build_mask([(7, 8.0, 5.0), (2, 2.0, 5.0)], MaskConfig(10, 12), 11, 11)
    assert seg[5, 5] == 2


def test_mask_band_semantics():
    seg = build_mask([(4, 10.0, 10.0)], MaskConfig(2, 5), 21, 21)
    assert seg[10, 12] == 4  # d = 2, inclusive
    assert seg[10, 13] == IGNORE  # d = 3
    assert seg[10, 15] == IGNORE  # d = 5, still inside R
    assert seg[10, 16] == 21  # d = 6


def test_mask_config_validation():
    MaskConfig(40, 40)
    with pytest.raises(InvalidConfig):
        MaskConfig(41, 40)
    with pytest.raises(InvalidConfig):
        MaskConfig(-1, 4)


def test_smooth_label_examples():
    cfg = SmoothingConfig(0.1)
    np.testing.assert_allclose(smooth_label(2, 5, cfg), [0, 0.05, 0.9, 0.05, 0], atol=1e-12)
    # boundary classes keep the mass that has no neighbour to go to
    np.testing.assert_allclose(smooth_label(0, 5, cfg), [0.95, 0.05, 0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(smooth_label(4, 5, cfg), [0, 0, 0, 0.05, 0.95], atol=1e-12)
    np.testing.assert_allclose(smooth_label(3, 5, SmoothingConfig(0.0)), np.eye(5)[3], atol=0)


@given(st.integers(0, 5), st.floats(0, 0.99))
def test_smooth_label_properties(x, p):
    t = smooth_label(x, 6, SmoothingConfig(p))
    assert abs(t.sum() - 1) < 1e-12
    assert t.min() >= 0
    # the true class keeps the plurality while 1 - p >= p / 2
    assert t.argmax() == x or p > 2 / 3 - 1e-12
    assert np.count_nonzero(t) <= 3


@given(st.integers(0, 5), st.floats(0, 0.99))
def test_smoothing_preserves_mean_away_from_boundary(x, p):
    t = smooth_label(x, 6, SmoothingConfig(p))
    if 0 < x < 5:
        assert abs(np.arange(6) @ t - x) < 1e-9


@given(st.floats(0, 5), st.floats(0, 0.5))
def test_fractional_target(t, p):
    cfg = SmoothingConfig(p)
    dist = fractional_target(t, 6, cfg)
    assert abs(dist.sum() - 1) < 1e-12
    if p == 0:
        assert abs(np.arange(6) @ dist - t) < 1e-9


def test_fractional_target_integer_is_smooth_label():
    cfg = SmoothingConfig(0.1)
    for k in range(6):
        assert np.abs(fractional_target(float(k), 6, cfg) - smooth_label(k, 6, cfg)).max() <= 1e-12


def test_foot_erosion_halved():
    cfg = SmoothingConfig(0.0)
    np.testing.assert_allclose(erosion_target(7, Limb.FOOT, cfg), [0, 0, 0, 0.5, 0.5, 0])
    np.testing.assert_allclose(erosion_target(10, Limb.FOOT, cfg), np.eye(6)[5])
    np.testing.assert_allclose(erosion_target(4, Limb.HAND, cfg), np.eye(6)[4])


def _foot(joints, size=24):
    return AnnotatedImage(np.zeros((size, size)), Limb.FOOT, Side.RIGHT, joints)


def test_pixel_targets_regions():
    img = _foot([Joint(0, 5, 5, 1, 4), Joint(3, 18, 18, 4, 0)])
    t = build_pixel_targets(img, mask_cfg=MaskConfig(3, 5), smooth_cfg=SmoothingConfig(0.0))
    assert t.seg.dtype == np.int16
    region0 = t.seg == 0
    assert region0.any() and np.all(t.narrowing_valid[region0])
    np.testing.assert_allclose(t.narrowing_target[5, 5], np.eye(5)[1])
    np.testing.assert_allclose(t.erosion_target[5, 5], np.eye(6)[2])
    np.testing.assert_allclose(t.narrowing_target[18, 18], np.eye(5)[4])
    # background and ignore pixels carry no damage supervision
    assert not t.narrowing_valid[t.seg == 21].any()
    assert not t.erosion_valid[t.seg == IGNORE].any()


def test_unscored_task_not_supervised():
    # type 12 is narrowing-only, type 17 erosion-only
    img = AnnotatedImage(
        np.zeros((24, 24)), Limb.HAND, Side.LEFT, [Joint(12, 5, 5, 2, None), Joint(17, 18, 18, None, 3)]
    )
    t = build_pixel_targets(img, mask_cfg=MaskConfig(3, 5))
    assert t.narrowing_valid[5, 5] and not t.erosion_valid[5, 5]
    assert t.erosion_valid[18, 18] and not t.narrowing_valid[18, 18]


def test_missing_score_raises():
    with pytest.raises(MissingScore):
        build_pixel_targets(_foot([Joint(0, 5, 5, None, 2)]))


def test_export_mask_png(tmp_path):
    from PIL import Image

    seg = build_mask([(0, 4.0, 4.0), (1, 12.0, 4.0)], MaskConfig(3, 5), 10, 16)
    path = tmp_path / "mask.png"
    export_mask_png(seg, path)
    with Image.open(path) as im:
        assert im.mode == "P"
        back = np.asarray(im).astype(np.int64)
    np.testing.assert_array_equal(np.where(back == 255, IGNORE, back), seg)
