import numpy as np
import pytest

from src.errors import DataError
from src.geometry import (
    ErrorMode,
    Window,
    area,
    classify_error,
    contains,
    flip_h,
    initial_window,
    iou,
    iou_matrix,
    margin_filter,
    nms,
)


def random_windows(rng, n):
    out = []
    for _ in range(n):
        x0, x1 = np.sort(rng.uniform(0, 1, 2))
        y0, y1 = np.sort(rng.uniform(0, 1, 2))
        if x1 - x0 < 1e-3 or y1 - y0 < 1e-3:
            continue
        out.append(Window(float(x0), float(y0), float(x1), float(y1)))
    return out


def test_iou_known_values():
    a = Window(0.0, 0.0, 0.5, 0.5)
    assert iou(a, a) == 1.0
    assert iou(a, Window(0.6, 0.6, 0.9, 0.9)) == 0.0
    assert iou(a, Window(0.25, 0.0, 0.75, 0.5)) == pytest.approx(1 / 3)
    # touching edges do not overlap
    assert iou(a, Window(0.5, 0.0, 1.0, 0.5)) == 0.0


def test_iou_symmetric_and_bounded():
    rng = np.random.default_rng(0)
    ws = random_windows(rng, 60)
    for a, b in zip(ws[::2], ws[1::2]):
        v = iou(a, b)
        assert 0.0 <= v <= 1.0
        assert v == iou(b, a)


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(1)
    a = random_windows(rng, 15)
    b = random_windows(rng, 9)
    m = iou_matrix(a, b)
    assert m.shape == (len(a), len(b))
    for i, wa in enumerate(a):
        for j, wb in enumerate(b):
            assert m[i, j] == pytest.approx(iou(wa, wb), abs=1e-12)


@pytest.mark.parametrize("coords", [(0.5, 0.1, 0.5, 0.9), (0.6, 0.1, 0.4, 0.9), (-0.1, 0.0, 0.5, 0.5), (0.0, 0.0, 1.2, 0.5)])
def test_invalid_window_rejected(coords):
    with pytest.raises(DataError):
        Window(*coords)


def test_pixel_conversion():
    w = Window.from_pixels((50, 25, 150, 75), 200, 100)
    assert w.as_tuple() == (0.25, 0.25, 0.75, 0.75)
    assert w.to_pixels(200, 100) == (50, 25, 150, 75)
    assert area(w) == 0.25


def test_margin_filter_and_initial_window():
    w0 = initial_window(0.04)
    inside = Window(0.1, 0.1, 0.5, 0.5)
    touching = Window(0.0, 0.1, 0.5, 0.5)
    assert margin_filter([w0, inside, touching], 0.04) == [w0, inside]
    assert margin_filter([touching], 0.0) == [touching]
    with pytest.raises(DataError):
        margin_filter([inside], 0.5)
    with pytest.raises(DataError):
        initial_window(-0.1)


def test_contains_is_non_strict():
    outer = Window(0.1, 0.1, 0.9, 0.9)
    assert contains(outer, outer)
    assert contains(outer, Window(0.2, 0.2, 0.3, 0.3))
    assert not contains(Window(0.2, 0.2, 0.3, 0.3), outer)


def test_flip_is_an_involution():
    w = Window(0.1, 0.2, 0.4, 0.9)
    assert flip_h(w).as_tuple() == pytest.approx((0.6, 0.2, 0.9, 0.9))
    assert flip_h(flip_h(w)).as_tuple() == pytest.approx(w.as_tuple())


GT = Window(0.2, 0.2, 0.8, 0.8)


@pytest.mark.parametrize("hyp, expected", [
    (Window(0.2, 0.2, 0.8, 0.8), ErrorMode.CORRECT_LOC),
    (Window(0.3, 0.3, 0.4, 0.4), ErrorMode.HYP_IN_GT),
    (Window(0.0, 0.0, 1.0, 1.0), ErrorMode.GT_IN_HYP),
    (Window(0.7, 0.7, 0.95, 0.95), ErrorMode.PARTIAL_OVERLAP),
    (Window(0.85, 0.85, 0.95, 0.95), ErrorMode.NO_OVERLAP),
])
def test_classify_error(hyp, expected):
    assert classify_error(hyp, [GT]) is expected


def test_classify_error_prefers_correct_loc_over_containment():
    # contained in the gt but with IoU >= 0.5
    assert classify_error(Window(0.2, 0.2, 0.8, 0.7), [GT]) is ErrorMode.CORRECT_LOC


def test_classify_error_needs_ground_truth():
    with pytest.raises(DataError):
        classify_error(GT, [])


def test_nms_keeps_best_of_overlapping():
    ws = [Window(0.1, 0.1, 0.5, 0.5), Window(0.12, 0.1, 0.52, 0.5), Window(0.6, 0.6, 0.9, 0.9)]
    assert nms(ws, [0.5, 0.9, 0.1]) == [1, 2]
    assert nms(ws, [0.5, 0.5, 0.5]) == [0, 2]
    with pytest.raises(DataError):
        nms(ws, [1.0])
