import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itfa import _boxops_py, boxops

try:
    from itfa import _boxops as _compiled
except ImportError:  # pragma: no cover
    _compiled = None

needs_ext = pytest.mark.skipif(_compiled is None, reason="compiled extension not built")


def rand_boxes(rng, n):
    xy = rng.integers(0, 50, (n, 2)).astype(float)
    wh = rng.integers(1, 20, (n, 2)).astype(float)
    return np.hstack([xy, xy + wh])


def test_iou_basic():
    assert boxops.iou([0, 0, 10, 10], [0, 0, 10, 10]) == 1.0
    assert boxops.iou([0, 0, 10, 10], [5, 0, 15, 10]) == pytest.approx(50 / 150)
    assert boxops.iou([0, 0, 10, 10], [10, 0, 20, 10]) == 0.0


def test_zero_area_box_has_zero_iou():
    assert boxops.iou([3, 3, 3, 8], [0, 0, 10, 10]) == 0.0
    assert boxops.iou([3, 3, 3, 8], [3, 3, 3, 8]) == 0.0


def test_nms_examples():
    boxes = [[0, 0, 10, 10], [1, 1, 11, 11], [20, 20, 30, 30]]
    assert list(boxops.nms(boxes, [0.9, 0.8, 0.7], 0.5)) == [0, 2]
    # IoU of the first pair is 81/119 = 0.68; at threshold 0.7 both survive
    assert list(boxops.nms(boxes, [0.9, 0.8, 0.7], 0.7)) == [0, 1, 2]
    assert len(boxops.nms(np.zeros((0, 4)), [], 0.5)) == 0


def test_nms_equal_iou_is_kept():
    # suppression needs IoU strictly above the threshold
    a, b = [0, 0, 10, 10], [0, 0, 10, 5]
    assert list(boxops.nms([a, b], [0.9, 0.8], 0.5)) == [0, 1]


def test_nms_length_mismatch():
    with pytest.raises(ValueError):
        boxops.nms([[0, 0, 1, 1]], [0.1, 0.2], 0.5)


def test_nms_score_ties_broken_by_coordinates():
    boxes = [[2, 2, 12, 12], [0, 0, 10, 10]]
    assert list(boxops.nms(boxes, [0.5, 0.5], 0.3)) == [1]


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 25), st.integers(0, 10_000))
def test_nms_invariant_to_input_order(n, seed):
    rng = np.random.default_rng(seed)
    boxes = rand_boxes(rng, n)
    scores = rng.integers(0, 5, n) / 4.0  # many ties
    perm = rng.permutation(n)
    kept = {tuple(boxes[i]) + (scores[i],) for i in boxops.nms(boxes, scores, 0.5)}
    kept_perm = {tuple(boxes[perm][i]) + (scores[perm][i],) for i in boxops.nms(boxes[perm], scores[perm], 0.5)}
    assert kept == kept_perm


def test_greedy_match_prefers_highest_iou_then_lowest_index():
    ious = np.array([[0.6, 0.6, 0.9], [0.7, 0.7, 0.95]])
    assert list(boxops.greedy_match(ious, 0.5)) == [2, 0]
    assert list(boxops.greedy_match(np.array([[0.4]]), 0.5)) == [-1]


def test_ap101_examples():
    assert boxops.ap101([1, 1], 2) == pytest.approx(1.0)
    assert boxops.ap101([0, 0], 2) == 0.0
    assert boxops.ap101([], 3) == 0.0
    # TP, FP, TP with 2 GT: precision 1 up to recall .5, 2/3 up to recall 1
    assert boxops.ap101([1, 0, 1], 2) == pytest.approx((51 * 1 + 50 * 2 / 3) / 101)


@needs_ext
def test_backend_parity():
    rng = np.random.default_rng(0)
    for _ in range(30):
        a, b = rand_boxes(rng, 17), rand_boxes(rng, 9)
        np.testing.assert_array_equal(_boxops_py.iou_matrix(a, b), _compiled.iou_matrix(a, b))
        scores = rng.random(17)
        order = boxops.canonical_order(a, scores)
        np.testing.assert_array_equal(_boxops_py.nms_ordered(a, order, 0.4), _compiled.nms_ordered(a, order, 0.4))
        ious = np.ascontiguousarray(_compiled.iou_matrix(a, b))
        np.testing.assert_array_equal(_boxops_py.greedy_match(ious, 0.3), _compiled.greedy_match(ious, 0.3))
        tp = (rng.random(17) < 0.5).astype(np.uint8)
        assert _boxops_py.ap101(tp, 9) == pytest.approx(_compiled.ap101(tp, 9), abs=1e-12)


def test_backend_flag_is_known():
    assert boxops.BACKEND in ("cython", "python")


def test_env_var_forces_fallback():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-c", "from itfa import boxops; print(boxops.BACKEND)"],
                         capture_output=True, text=True, env={**__import__("os").environ, "ITFA_PURE_PYTHON": "1"})
    assert out.stdout.strip() == "python"
