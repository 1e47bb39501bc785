"""Detection pipeline: proposals, joint classification, box decode, per-class NMS."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from itfa import boxops
from itfa.detector import Detector, clip_boxes, decode_boxes, images_to_tensor
from itfa.synthdata import ClassVocabulary

nms = boxops.nms


class VocabularyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    box: tuple[float, float, float, float]
    class_index: int
    score: float


def _check_vocab(model: Detector, vocab: ClassVocabulary) -> None:
    if vocab.num_base != model.num_base or (model.stage == "branched" and vocab.num_novel != model.num_novel):
        raise VocabularyMismatchError(
            f"vocabulary ({vocab.num_base} base, {vocab.num_novel} novel) does not fit the "
            f"checkpoint ({model.num_base} base, {model.num_novel} novel)"
        )


@torch.no_grad()
def detect_batch(images: Sequence[np.ndarray], model: Detector, vocab: ClassVocabulary,
                 score_threshold: float | None = None, nms_iou: float | None = None,
                 max_detections: int | None = None) -> list[list[Detection]]:
    """Run the full pipeline on several images; one score-sorted list per image."""
    _check_vocab(model, vocab)
    cfg = model.cfg
    thr = cfg.score_threshold if score_threshold is None else score_threshold
    iou_thr = cfg.nms_iou if nms_iou is None else nms_iou
    cap = cfg.max_detections if max_detections is None else max_detections
    if len(images) == 0:
        return []
    z = model.backbone_forward(images_to_tensor(images))
    proposals = model.rpn_forward(z, "eval")
    counts = [len(p.boxes) for p in proposals]
    out = model.predict_pooled(model.pool(z, [p.boxes for p in proposals]))
    probs = out.probabilities
    all_boxes = torch.cat([p.boxes for p in proposals])

    results = []
    start = 0
    for n in counts:
        sl = slice(start, start + n)
        start += n
        props, pr, deltas = all_boxes[sl], probs[sl], out.box_deltas[sl]
        if cfg.regressor == "agnostic":
            shared = clip_boxes(decode_boxes(deltas, props), cfg.canvas).double().numpy()
        dets: list[Detection] = []
        for c in range(pr.shape[1]):
            if c == model.num_base:  # background way
                continue
            scores = pr[:, c].double().numpy()
            sel = np.nonzero(scores > thr)[0]
            if not len(sel):
                continue
            if cfg.regressor == "agnostic":
                boxes = shared[sel]
            elif c < model.num_base:
                boxes = clip_boxes(decode_boxes(deltas[sel, c], props[sel]), cfg.canvas).double().numpy()
            else:  # novel classes have no class-specific regressor rows
                boxes = props[sel].double().numpy()
            keep = nms(boxes, scores[sel], iou_thr)
            dets.extend(Detection(tuple(float(v) for v in boxes[k]), c, float(scores[sel][k])) for k in keep)
        dets.sort(key=lambda d: (-d.score, d.class_index, d.box))
        results.append(dets[:cap])
    return results


def detect(image: np.ndarray, model: Detector, vocab: ClassVocabulary, **kw) -> list[Detection]:
    return detect_batch([image], model, vocab, **kw)[0]


def detect_all(images, model: Detector, vocab: ClassVocabulary, batch_size: int = 16, **kw) -> list[list[Detection]]:
    pixels = [im.pixels for im in images]
    out = []
    for i in range(0, len(pixels), batch_size):
        out.extend(detect_batch(pixels[i:i + batch_size], model, vocab, **kw))
    return out


# ---------------------------------------------------------------------------
# detection dump: one JSON record per line

def write_detections(path, image_ids: Iterable[int], detections: Iterable[list[Detection]],
                     vocab: ClassVocabulary) -> None:
    with open(path, "w") as fh:
        for image_id, dets in zip(image_ids, detections):
            for d in dets:
                fh.write(json.dumps({"image_id": int(image_id), "class": vocab.name_of(d.class_index),
                                     "score": d.score, "box": list(d.box)}) + "\n")


def read_detections(path, vocab: ClassVocabulary) -> dict[int, list[Detection]]:
    out: dict[int, list[Detection]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        out.setdefault(rec["image_id"], []).append(
            Detection(tuple(rec["box"]), vocab.index_of(rec["class"]), rec["score"]))
    return out
