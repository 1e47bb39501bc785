"""Pure-Python box kernels, used when the compiled extension is unavailable.

Same signatures and results as the Cython module ``itfa._boxops``.
"""
from __future__ import annotations

import numpy as np


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    valid = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (inter > 0)
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=valid)
    return out


def nms_ordered(boxes: np.ndarray, order: np.ndarray, thresh: float) -> np.ndarray:
    keep = []
    remaining = np.asarray(order, dtype=np.int64)
    while remaining.size:
        i = remaining[0]
        keep.append(i)
        if remaining.size == 1:
            break
        ious = iou_matrix(boxes[i : i + 1], boxes[remaining[1:]])[0]
        remaining = remaining[1:][ious <= thresh]
    return np.asarray(keep, dtype=np.int64)


def greedy_match(ious: np.ndarray, thresh: float) -> np.ndarray:
    nd, ng = ious.shape
    matched = np.full(nd, -1, dtype=np.int64)
    taken = np.zeros(ng, dtype=bool)
    for i in range(nd):
        cand = np.where(taken, -1.0, ious[i])
        if ng == 0:
            continue
        j = int(np.argmax(cand))  # first maximum -> lowest index on ties
        if cand[j] >= thresh and cand[j] >= 0:
            taken[j] = True
            matched[i] = j
    return matched


def ap101(tp: np.ndarray, num_gt: int) -> float:
    tp = np.asarray(tp, dtype=np.float64)
    if num_gt <= 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, tp.size + 1)
    rec = ctp / num_gt
    prec = np.maximum.accumulate(prec[::-1])[::-1]
    grid = np.arange(101) / 100.0
    idx = np.searchsorted(rec, grid, side="left")
    hit = idx < tp.size
    return float(prec[idx[hit]].sum() / 101.0)
