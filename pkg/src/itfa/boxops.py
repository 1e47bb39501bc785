"""Box kernels with a compiled core and a pure-Python fallback.

The Cython extension ``itfa._boxops`` is used when it imports; otherwise the
NumPy implementation in ``itfa._boxops_py`` takes over. Set
``ITFA_PURE_PYTHON=1`` to force the fallback.
"""
from __future__ import annotations

import os

import numpy as np

from itfa import _boxops_py

if os.environ.get("ITFA_PURE_PYTHON", "") not in ("", "0"):
    _impl = _boxops_py
    BACKEND = "python"
else:
    try:
        from itfa import _boxops as _impl  # type: ignore[attr-defined,no-redef]

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on the build
        _impl = _boxops_py
        BACKEND = "python"


def _as_boxes(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


def iou(box_a, box_b) -> float:
    """IoU of two boxes; a zero-area box has IoU 0 against anything."""
    return float(_impl.iou_matrix(_as_boxes(box_a), _as_boxes(box_b))[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    return _impl.iou_matrix(_as_boxes(a), _as_boxes(b))


def canonical_order(boxes, scores) -> np.ndarray:
    """Descending score, then lexicographic box coordinates, then input index."""
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    idx = np.arange(len(scores))
    keys = (idx, boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], -scores)
    return np.lexsort(keys).astype(np.int64)


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Returns indices of kept boxes in visit order. A box is suppressed when its
    IoU with an already kept box exceeds ``iou_threshold``.
    """
    boxes = _as_boxes(boxes)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) != len(scores):
        raise ValueError(f"{len(boxes)} boxes but {len(scores)} scores")
    if len(boxes) == 0:
        return np.zeros(0, dtype=np.int64)
    order = canonical_order(boxes, scores)
    return _impl.nms_ordered(boxes, order, float(iou_threshold))


def greedy_match(ious, iou_threshold: float) -> np.ndarray:
    """Per score-sorted detection, the index of its matched GT or -1."""
    ious = np.ascontiguousarray(np.asarray(ious, dtype=np.float64))
    if ious.ndim != 2:
        raise ValueError("ious must be a 2-D (detections, ground truths) matrix")
    return _impl.greedy_match(ious, float(iou_threshold))


def ap101(tp, num_gt: int) -> float:
    tp = np.ascontiguousarray(np.asarray(tp, dtype=np.uint8).reshape(-1))
    return float(_impl.ap101(tp, int(num_gt)))
