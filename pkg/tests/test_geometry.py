import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from refdet.geometry import (area, box_convert, box_distance, box_distance_matrix, giou, giou_matrix,
                             iou, iou_matrix, smooth_l1)


def random_xyxy(rng, n, size=100.0):
    xy = rng.uniform(0, size, (n, 2))
    wh = rng.uniform(0.5, size / 2, (n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


box_st = st.tuples(st.floats(0, 90), st.floats(0, 90), st.floats(0.5, 40), st.floats(0.5, 40)).map(
    lambda t: np.array([t[0], t[1], t[0] + t[2], t[1] + t[3]]))


@pytest.mark.parametrize("fmt", ["xywh", "cxcywh", "xyxy_n", "cxcywh_n"])
def test_round_trip(fmt, rng):
    b = random_xyxy(rng, 20)
    back = box_convert(box_convert(b, "xyxy", fmt, (128, 96)), fmt, "xyxy", (128, 96))
    np.testing.assert_allclose(back, b, atol=1e-12)


def test_known_conversions():
    np.testing.assert_allclose(box_convert([10, 20, 30, 60], "xyxy", "xywh"), [10, 20, 20, 40])
    np.testing.assert_allclose(box_convert([10, 20, 30, 60], "xyxy", "cxcywh"), [20, 40, 20, 40])
    np.testing.assert_allclose(box_convert([0, 0, 10, 10], "xyxy", "cxcywh_n", (100, 100)), [0.05, 0.05, 0.1, 0.1])


def test_conversion_errors():
    with pytest.raises(ValueError):
        box_convert([0, 0, 1, 1], "xyxy", "cxcywh_n")
    with pytest.raises(ValueError):
        box_convert([0, 0, 1, 1], "xyxy", "cxcywh_n", (0, 10))
    with pytest.raises(ValueError):
        box_convert([0, 0, np.nan, 1], "xyxy", "xywh")
    with pytest.raises(ValueError):
        box_convert([0, 0, 1, 1], "xyxy", "polar")


def test_iou_examples():
    assert iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(1 / 3)
    assert iou([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    # zero-area box gives IoU 0, not an error
    assert iou([0, 0, 0, 0], [0, 0, 1, 1]) == 0.0


def test_giou_disjoint_hand_value():
    # two unit squares, enclosing box 3x3: 0 - (9 - 2) / 9
    assert giou([0, 0, 1, 1], [2, 2, 3, 3]) == pytest.approx(-7 / 9, abs=1e-12)


def test_giou_two_zero_area_boxes_rejected():
    with pytest.raises(ValueError):
        giou([1, 1, 1, 1], [1, 1, 1, 1])


def test_inverted_box_rejected():
    with pytest.raises(ValueError):
        iou([5, 5, 0, 0], [0, 0, 1, 1])


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_giou_properties(a, b):
    i, g = iou(a, b), giou(a, b)
    assert 0.0 <= i <= 1.0
    assert -1.0 <= g <= i + 1e-12
    assert i == pytest.approx(iou(b, a))
    assert g == pytest.approx(giou(b, a))


def test_matrix_matches_scalar(rng):
    a, b = random_xyxy(rng, 5), random_xyxy(rng, 7)
    I, G = iou_matrix(a, b), giou_matrix(a, b)
    for i in range(5):
        for j in range(7):
            assert I[i, j] == pytest.approx(iou(a[i], b[j]))
            assert G[i, j] == pytest.approx(giou(a[i], b[j]))


def test_smooth_l1():
    np.testing.assert_allclose(smooth_l1(np.array([0.0, 0.5, 1.0, 3.0])), [0.0, 0.125, 0.5, 2.5])


def test_box_distance():
    b = [0.5, 0.5, 0.2, 0.2]
    assert box_distance(b, b) == pytest.approx(0.0)
    # pure shift by 0.1 in x: L1 = 0.5 * 0.01, GIoU = (0.1*0.2)/(0.3*0.2) ... computed directly
    c = [0.6, 0.5, 0.2, 0.2]
    inter, union, enc = 0.1 * 0.2, 2 * 0.04 - 0.02, 0.3 * 0.2
    g = inter / union - (enc - union) / enc
    assert box_distance(b, c) == pytest.approx(5 * 0.005 + 2 * (1 - g))
    with pytest.raises(ValueError):
        box_distance_matrix([b], [c], w_l1=-1)


def test_area():
    assert area(np.array([0, 0, 3, 4])) == 12
