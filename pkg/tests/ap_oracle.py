"""Independent AP reference: exact rational arithmetic, no shared code with itfa."""
from fractions import Fraction


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    if iw <= 0 or ih <= 0 or area_a <= 0 or area_b <= 0:
        return Fraction(0)
    inter = Fraction(iw * ih)
    return inter / (area_a + area_b - inter)


def tp_labels(dets, gts, thr):
    """dets: [(image, score, box)] with distinct scores; gts: {image: [box]}."""
    thr = Fraction(thr).limit_denominator(1000)
    used = {img: [False] * len(g) for img, g in gts.items()}
    out = []
    for img, _, box in sorted(dets, key=lambda d: -d[1]):
        best, best_iou = -1, None
        for j, g in enumerate(gts.get(img, [])):
            if used[img][j]:
                continue
            v = iou(box, g)
            if v >= thr and (best_iou is None or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            used[img][best] = True
        out.append(best >= 0)
    return out


def envelope_ap(tps, num_gt):
    """Mean over r = 0, 0.01, ..., 1 of the best precision at any rank with recall >= r."""
    points = []
    tp = 0
    for rank, hit in enumerate(tps, 1):
        tp += hit
        points.append((Fraction(tp, num_gt), Fraction(tp, rank)))
    total = Fraction(0)
    for k in range(101):
        r = Fraction(k, 100)
        total += max((p for rec, p in points if rec >= r), default=Fraction(0))
    return total / 101
