"""COCO-style evaluation: per-class AP over IoU 0.50:0.95, AP50, base/novel/harmonic groups."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from itfa import boxops
from itfa.synthdata import AnnotatedImage, ClassVocabulary

IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
REPORT_SCHEMA_VERSION = 1

iou = boxops.iou


class AggregationError(ValueError):
    pass


def match_detections(det_boxes, gt_boxes, iou_threshold: float) -> np.ndarray:
    """TP (True) / FP (False) per detection; detections must be sorted by descending score."""
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if len(gt_boxes) == 0:
        return np.zeros(len(det_boxes), dtype=bool)
    return boxops.greedy_match(boxops.iou_matrix(det_boxes, gt_boxes), iou_threshold) >= 0


def average_precision(tp_labels, num_gt: int) -> float:
    """101-point interpolated AP from TP/FP labels in score order."""
    return boxops.ap101(np.asarray(tp_labels, dtype=bool), num_gt)


def harmonic_mean(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    if a <= 0 or b <= 0:
        return 0.0
    return 2 * a * b / (a + b)


def class_ap(detections: Sequence[tuple[int, float, tuple]], gts: Mapping[int, np.ndarray],
             thresholds: Sequence[float] = IOU_THRESHOLDS) -> np.ndarray | None:
    """AP of one class at each IoU threshold.

    ``detections`` are (image_id, score, box) triples pooled over images and
    ``gts`` maps image_id -> (G, 4) boxes. Returns None when the class has
    neither GT nor detections (excluded from means).
    """
    num_gt = sum(len(g) for g in gts.values())
    if num_gt == 0:
        return None if not detections else np.zeros(len(thresholds))
    order = sorted(range(len(detections)), key=lambda i: -detections[i][1])  # stable
    dets = [detections[i] for i in order]
    by_image: dict[int, list[int]] = {}
    for rank, (img, _, _) in enumerate(dets):
        by_image.setdefault(img, []).append(rank)
    out = np.zeros(len(thresholds))
    ious_cache = {}
    for img, ranks in by_image.items():
        g = gts.get(img)
        if g is not None and len(g):
            ious_cache[img] = boxops.iou_matrix([dets[r][2] for r in ranks], g)
    for t, thr in enumerate(thresholds):
        tp = np.zeros(len(dets), dtype=bool)
        for img, ranks in by_image.items():
            if img in ious_cache:
                tp[ranks] = boxops.greedy_match(ious_cache[img], thr) >= 0
        out[t] = boxops.ap101(tp, num_gt)
    return out


@dataclass
class EvalReport:
    """APs in [0, 1]; group fields are None when the group has no evaluable class."""

    per_class_ap: dict[str, float] = field(default_factory=dict)
    per_class_ap50: dict[str, float] = field(default_factory=dict)
    bAP: float | None = None
    nAP: float | None = None
    hAP: float | None = None
    bAP50: float | None = None
    nAP50: float | None = None
    hAP50: float | None = None
    group_aps: dict[str, float | None] = field(default_factory=dict)
    mode: str = "joint"
    seeds: list[int] = field(default_factory=list)
    per_seed: list[dict] = field(default_factory=list)
    mean_of_seed_hAP: float | None = None
    mean_of_seed_hAP50: float | None = None
    note: str = ""

    def to_dict(self) -> dict:
        return {"schema_version": REPORT_SCHEMA_VERSION, **self.__dict__}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"unsupported report schema version {version}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def group_report(per_class_ap: Mapping[str, float], partition: Mapping[str, Sequence[str]],
                 pair: tuple[str, str] | None = ("base", "novel")) -> dict[str, float | None]:
    """Mean AP of each named class group, plus the harmonic mean of ``pair``.

    Empty groups (no evaluable member) come back as None, never 0.
    """
    seen: set[str] = set()
    out: dict[str, float | None] = {}
    for name, members in partition.items():
        if seen & set(members):
            raise ValueError(f"group {name!r} overlaps another group")
        seen |= set(members)
        vals = [per_class_ap[m] for m in members if m in per_class_ap]
        out[name] = float(np.mean(vals)) if vals else None
    if pair is not None and pair[0] in out and pair[1] in out:
        out["harmonic"] = harmonic_mean(out[pair[0]], out[pair[1]])
    return out


def evaluate(detections: Sequence[Sequence], images: Sequence[AnnotatedImage], vocab: ClassVocabulary,
             mode: str = "joint", extra_groups: Mapping[str, Sequence[str]] | None = None) -> EvalReport:
    """Score per-image detection lists against the images' ground truth.

    ``mode``: ``joint`` (base + novel), ``base_only`` or ``novel_only``; the
    restricted modes drop other classes from both GT and detections.
    """
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    if len(detections) != len(images):
        raise ValueError(f"{len(detections)} detection lists for {len(images)} images")
    classes = {"joint": vocab.class_indices, "base_only": vocab.base_indices,
               "novel_only": vocab.novel_indices}[mode]
    per_ap, per_ap50 = {}, {}
    has_gt = set()
    for c in classes:
        gts = {img.image_id: img.boxes()[img.labels() == c] for img in images}
        dets = [(img.image_id, d.score, d.box) for img, dl in zip(images, detections) for d in dl
                if d.class_index == c]
        aps = class_ap(dets, gts)
        if aps is None:
            continue
        name = vocab.name_of(c)
        if any(len(g) for g in gts.values()):
            has_gt.add(name)
        per_ap[name] = float(aps.mean())
        per_ap50[name] = float(aps[0])

    # classes without GT keep their AP entry but stay out of group means
    base = [vocab.name_of(c) for c in vocab.base_indices] if mode != "novel_only" else []
    novel = [vocab.name_of(c) for c in vocab.novel_indices] if mode != "base_only" else []
    groups = {"base": [n for n in base if n in has_gt], "novel": [n for n in novel if n in has_gt]}
    g = group_report(per_ap, groups)
    g50 = group_report(per_ap50, groups)
    report = EvalReport(per_ap, per_ap50, g["base"], g["novel"], g["harmonic"], g50["base"], g50["novel"],
                        g50["harmonic"], mode=mode)
    if extra_groups:
        report.group_aps = group_report(
            per_ap, {k: [n for n in v if n in has_gt] for k, v in extra_groups.items()}, pair=None)
    return report


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def multi_seed_mean(reports: Sequence[EvalReport], seeds: Sequence[int] | None = None) -> EvalReport:
    """Average every AP field over seeds; hAP is recomputed from the mean bAP/nAP.

    The mean of the per-seed hAPs is kept alongside in ``mean_of_seed_hAP``.
    """
    if not reports:
        raise AggregationError("no reports to aggregate")
    keys = set(reports[0].per_class_ap)
    for r in reports[1:]:
        if set(r.per_class_ap) != keys or r.mode != reports[0].mode:
            raise AggregationError("reports cover different vocabularies or modes")
        if set(r.group_aps) != set(reports[0].group_aps):
            raise AggregationError("reports use different partitions")
    out = EvalReport(mode=reports[0].mode)
    out.per_class_ap = {k: _mean(r.per_class_ap[k] for r in reports) for k in reports[0].per_class_ap}
    out.per_class_ap50 = {k: _mean(r.per_class_ap50[k] for r in reports) for k in reports[0].per_class_ap50}
    for f in ("bAP", "nAP", "bAP50", "nAP50"):
        setattr(out, f, _mean(getattr(r, f) for r in reports))
    out.group_aps = {k: _mean(r.group_aps[k] for r in reports) for k in reports[0].group_aps}
    out.hAP = harmonic_mean(out.bAP, out.nAP)
    out.hAP50 = harmonic_mean(out.bAP50, out.nAP50)
    out.mean_of_seed_hAP = _mean(r.hAP for r in reports)
    out.mean_of_seed_hAP50 = _mean(r.hAP50 for r in reports)
    out.seeds = list(seeds) if seeds is not None else [s for r in reports for s in r.seeds]
    out.per_seed = [r.to_dict() for r in reports]
    return out


def standard_error(values: Sequence[float]) -> float:
    vals = np.asarray(values, dtype=np.float64)
    if len(vals) < 2:
        return 0.0
    return float(vals.std(ddof=1) / math.sqrt(len(vals)))
