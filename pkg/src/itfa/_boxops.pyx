# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels: IoU, greedy NMS, greedy GT matching, 101-point AP.

Boxes are float64 ``(N, 4)`` arrays in ``(x1, y1, x2, y2)`` form. The call
signatures mirror :mod:`itfa._boxops_py` exactly; :mod:`itfa.boxops` picks one.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef inline double _iou(double ax1, double ay1, double ax2, double ay2,
                        double bx1, double by1, double bx2, double by2) nogil:
    cdef double area_a = (ax2 - ax1) * (ay2 - ay1)
    cdef double area_b = (bx2 - bx1) * (by2 - by1)
    if area_a <= 0.0 or area_b <= 0.0:
        return 0.0
    cdef double iw = (ax2 if ax2 < bx2 else bx2) - (ax1 if ax1 > bx1 else bx1)
    cdef double ih = (ay2 if ay2 < by2 else by2) - (ay1 if ay1 > by1 else by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    cdef double inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(a[i, 0], a[i, 1], a[i, 2], a[i, 3],
                               b[j, 0], b[j, 1], b[j, 2], b[j, 3])
    return out


def nms_ordered(const double[:, ::1] boxes, const cnp.int64_t[::1] order, double thresh):
    """Greedy NMS visiting boxes in ``order``; returns kept indices in visit order."""
    cdef Py_ssize_t n = order.shape[0], i, j, bi, bj, nkeep = 0
    suppressed = np.zeros(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.uint8_t[::1] sup = suppressed
    cdef cnp.int64_t[::1] kp = keep
    with nogil:
        for i in range(n):
            if sup[i]:
                continue
            bi = order[i]
            kp[nkeep] = bi
            nkeep += 1
            for j in range(i + 1, n):
                if sup[j]:
                    continue
                bj = order[j]
                if _iou(boxes[bi, 0], boxes[bi, 1], boxes[bi, 2], boxes[bi, 3],
                        boxes[bj, 0], boxes[bj, 1], boxes[bj, 2], boxes[bj, 3]) > thresh:
                    sup[j] = 1
    return keep[:nkeep].copy()


def greedy_match(const double[:, ::1] ious, double thresh):
    """Match score-sorted detections (rows) to GTs (columns).

    Each detection takes the highest-IoU still-unmatched GT with IoU >= thresh,
    lowest column index on ties. Returns the matched column per row, -1 for FP.
    """
    cdef Py_ssize_t nd = ious.shape[0], ng = ious.shape[1], i, j, best
    cdef double best_iou, v
    matched = np.full(nd, -1, dtype=np.int64)
    taken = np.zeros(ng, dtype=np.uint8)
    cdef cnp.int64_t[::1] mt = matched
    cdef cnp.uint8_t[::1] tk = taken
    with nogil:
        for i in range(nd):
            best = -1
            best_iou = thresh
            for j in range(ng):
                if tk[j]:
                    continue
                v = ious[i, j]
                if v >= best_iou and (best < 0 or v > ious[i, best]):
                    best = j
                    best_iou = v
            if best >= 0:
                tk[best] = 1
                mt[i] = best
    return matched


def ap101(const cnp.uint8_t[::1] tp, Py_ssize_t num_gt):
    """Area under the precision envelope sampled at recall 0.00, 0.01, ..., 1.00."""
    cdef Py_ssize_t n = tp.shape[0], i, k, ntp = 0
    if num_gt <= 0:
        return 0.0
    if n == 0:
        return 0.0
    prec = np.empty(n, dtype=np.float64)
    rec = np.empty(n, dtype=np.float64)
    cdef double[::1] p = prec
    cdef double[::1] r = rec
    cdef double total = 0.0, target
    with nogil:
        for i in range(n):
            ntp += tp[i]
            p[i] = <double>ntp / <double>(i + 1)
            r[i] = <double>ntp / <double>num_gt
        for i in range(n - 2, -1, -1):
            if p[i + 1] > p[i]:
                p[i] = p[i + 1]
        i = 0
        for k in range(101):
            target = <double>k / 100.0
            while i < n and r[i] < target:
                i += 1
            if i >= n:
                break
            total += p[i]
    return total / 101.0
