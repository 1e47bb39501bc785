"""Base-stage training, branch surgery, freeze policy and novel-branch fine-tuning."""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from itfa.detector import Detector, StageError, box_iou, encode_boxes, images_to_tensor
from itfa.synthdata import AnnotatedImage, ClassVocabulary

NOVEL_HEAD_INIT_STD = 0.01


class LabelError(ValueError):
    pass


class DataContractError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite {component} loss: {value}")
        self.component = component


@dataclass
class TrainConfig:
    lr: float = 1e-2
    decay_steps: tuple[int, ...] = (1400, 1800)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    steps: int = 2000
    warmup_steps: int = 0
    seed: int = 0
    rois_per_image: int = 32
    positive_fraction: float = 0.25
    rpn_anchors_per_image: int = 64

    def __post_init__(self):
        self.decay_steps = tuple(int(s) for s in self.decay_steps)
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if any(b <= a for a, b in zip(self.decay_steps, self.decay_steps[1:])):
            raise ValueError("decay steps must be strictly increasing")

    @classmethod
    def base_default(cls, **kw) -> "TrainConfig":
        return cls(**{"steps": 2000, "decay_steps": (1400, 1800), "warmup_steps": 100, **kw})

    @classmethod
    def finetune_default(cls, **kw) -> "TrainConfig":
        return cls(**{"steps": 300, "decay_steps": (150, 200), **kw})

    def lr_at(self, step: int) -> float:
        lr = self.lr * self.decay_factor ** sum(step >= s for s in self.decay_steps)
        if self.warmup_steps and step < self.warmup_steps:
            lr *= (step + 1) / self.warmup_steps
        return lr

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_steps"] = list(self.decay_steps)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


FINETUNE_LAYERS = {"none": (), "fc2": ("roi.novel.fc2",), "fc1_fc2": ("roi.novel.fc1", "roi.novel.fc2")}


@dataclass(frozen=True)
class FreezePolicy:
    """Which novel RoI layers fine-tune; ``cls.novel`` always trains, the base path never does."""

    finetune_layers: str = "fc2"
    always_trainable: tuple[str, ...] = ("cls.novel",)
    always_frozen: tuple[str, ...] = ("backbone", "rpn", "reg", "roi.base", "cls.base")

    def __post_init__(self):
        if self.finetune_layers not in FINETUNE_LAYERS:
            raise ValueError(f"finetune_layers must be one of {sorted(FINETUNE_LAYERS)}")

    def is_trainable(self, name: str) -> bool:
        prefixes = self.always_trainable + FINETUNE_LAYERS[self.finetune_layers]
        return any(name.startswith(p + ".") for p in prefixes)


# ---------------------------------------------------------------------------
# losses

class RPNTargets(NamedTuple):
    labels: torch.Tensor  # (A,) 1 foreground, 0 background, -1 ignored
    deltas: torch.Tensor  # (A, 4), meaningful where labels == 1


def rpn_targets(anchors: torch.Tensor, gt_boxes: torch.Tensor, generator: torch.Generator,
                num_samples: int = 64, positive_fraction: float = 0.5,
                fg_iou: float = 0.7, bg_iou: float = 0.3) -> RPNTargets:
    A = len(anchors)
    labels = torch.full((A,), -1, dtype=torch.long)
    deltas = torch.zeros(A, 4)
    if len(gt_boxes) == 0:
        labels[:] = 0
    else:
        ious = box_iou(anchors, gt_boxes)
        best, idx = ious.max(dim=1)
        labels[best < bg_iou] = 0
        labels[best >= fg_iou] = 1
        # every GT keeps its best anchor(s)
        gt_best = ious.max(dim=0).values
        for j in range(len(gt_boxes)):
            hit = (ious[:, j] == gt_best[j]) & (gt_best[j] > 0)
            labels[hit] = 1
            idx[hit] = j
        pos = labels == 1
        deltas[pos] = encode_boxes(gt_boxes[idx[pos]], anchors[pos])
    # subsample
    pos_idx = torch.nonzero(labels == 1).flatten()
    neg_idx = torch.nonzero(labels == 0).flatten()
    n_pos = min(len(pos_idx), int(num_samples * positive_fraction))
    n_neg = min(len(neg_idx), num_samples - n_pos)
    keep = torch.zeros(A, dtype=torch.bool)
    keep[pos_idx[torch.randperm(len(pos_idx), generator=generator)[:n_pos]]] = True
    keep[neg_idx[torch.randperm(len(neg_idx), generator=generator)[:n_neg]]] = True
    labels[~keep] = -1
    return RPNTargets(labels, deltas)


def rpn_loss(obj_logits: torch.Tensor, deltas: torch.Tensor, targets: Sequence[RPNTargets]) -> torch.Tensor:
    """Objectness BCE over sampled anchors plus L1 on positive-anchor deltas.

    Ignored anchors (label -1) contribute nothing; with no positive anchors the
    regression term is exactly zero.
    """
    labels = torch.stack([t.labels for t in targets])
    tdeltas = torch.stack([t.deltas for t in targets])
    sampled = labels >= 0
    if sampled.any():
        obj = F.binary_cross_entropy_with_logits(obj_logits[sampled], labels[sampled].float())
    else:
        obj = obj_logits.sum() * 0.0
    pos = labels == 1
    return obj + box_regression_loss(deltas[pos], tdeltas[pos], torch.ones(int(pos.sum()), dtype=torch.bool))


def classification_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over RoIs."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if targets.numel() and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise LabelError(f"targets must lie in [0, {logits.shape[1]}), got range "
                         f"[{int(targets.min())}, {int(targets.max())}]")
    if targets.numel() == 0:
        return logits.sum() * 0.0
    return F.cross_entropy(logits, targets)


def box_regression_loss(pred: torch.Tensor, target: torch.Tensor, positive: torch.Tensor) -> torch.Tensor:
    """L1 averaged over positive RoIs and their 4 coordinates; 0 without positives."""
    positive = torch.as_tensor(positive, dtype=torch.bool)
    if not positive.any():
        return pred.sum() * 0.0
    return (pred[positive] - target[positive]).abs().mean()


# ---------------------------------------------------------------------------
# RoI sampling

class RoISample(NamedTuple):
    boxes: torch.Tensor  # (R, 4)
    labels: torch.Tensor  # (R,) joint class index, background = |base|
    target_deltas: torch.Tensor  # (R, 4)
    positive: torch.Tensor  # (R,) bool


def sample_rois(proposals: torch.Tensor, gt_boxes: torch.Tensor, gt_labels: torch.Tensor, background: int,
                generator: torch.Generator, num_samples: int = 32, positive_fraction: float = 0.25,
                fg_iou: float = 0.5, bg_iou: float = 0.5) -> RoISample:
    """Label proposals (plus the GT boxes themselves) and subsample them.

    IoU >= ``fg_iou`` takes the matched GT's class, IoU < ``bg_iou`` becomes
    background, anything between is ignored.
    """
    boxes = torch.cat([proposals, gt_boxes], dim=0) if len(gt_boxes) else proposals
    labels = torch.full((len(boxes),), background, dtype=torch.long)
    deltas = torch.zeros(len(boxes), 4)
    usable = torch.ones(len(boxes), dtype=torch.bool)
    if len(gt_boxes):
        ious = box_iou(boxes, gt_boxes)
        best, idx = ious.max(dim=1)
        fg = best >= fg_iou
        usable = fg | (best < bg_iou)
        labels[fg] = gt_labels[idx[fg]]
        deltas[fg] = encode_boxes(gt_boxes[idx[fg]], boxes[fg])
    fg_idx = torch.nonzero(usable & (labels != background)).flatten()
    bg_idx = torch.nonzero(usable & (labels == background)).flatten()
    n_fg = min(len(fg_idx), int(round(num_samples * positive_fraction)))
    n_bg = min(len(bg_idx), num_samples - n_fg)
    pick = torch.cat([
        fg_idx[torch.randperm(len(fg_idx), generator=generator)[:n_fg]],
        bg_idx[torch.randperm(len(bg_idx), generator=generator)[:n_bg]],
    ])
    return RoISample(boxes[pick], labels[pick], deltas[pick], labels[pick] != background)


def _gt_tensors(img: AnnotatedImage) -> tuple[torch.Tensor, torch.Tensor]:
    return torch.from_numpy(img.boxes()).float(), torch.from_numpy(img.labels())


# ---------------------------------------------------------------------------
# optimisation helpers

class LossBreakdown(NamedTuple):
    rpn: float
    cls: float
    loc: float
    total: float


def make_optimizer(model: Detector, cfg: TrainConfig) -> torch.optim.SGD:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def _check_finite(**components: torch.Tensor) -> None:
    for name, value in components.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name, float(value))


def iterate_batches(images: Sequence, batch_size: int, seed: int) -> Iterator[list]:
    """Endless deterministic batches: a fresh permutation each epoch."""
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(images))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < batch_size and len(order) >= batch_size:
                continue
            yield [images[i] for i in chunk]


def base_train_step(model: Detector, optimizer: torch.optim.Optimizer, batch: Sequence[AnnotatedImage],
                    cfg: TrainConfig, step: int, generator: torch.Generator) -> LossBreakdown:
    """One SGD step on ``L_rpn + L_cls + L_loc`` over every parameter."""
    if model.stage != "base":
        raise StageError("base training needs a base-stage model")
    for img in batch:
        if any(inst.class_index >= model.num_base for inst in img.instances):
            raise DataContractError(f"image {img.image_id} carries a non-base label")
    _set_lr(optimizer, cfg.lr_at(step))

    z = model.backbone_forward(images_to_tensor([im.pixels for im in batch]))
    obj, deltas = model.rpn(z)
    gts = [_gt_tensors(im) for im in batch]
    targets = [rpn_targets(model.anchors, g[0], generator, cfg.rpn_anchors_per_image) for g in gts]
    l_rpn = rpn_loss(obj, deltas, targets)

    proposals = model.propose(obj.detach(), deltas.detach(), "train")
    samples = [
        sample_rois(p.boxes, gb, gl, model.num_base, generator, cfg.rois_per_image, cfg.positive_fraction)
        for p, (gb, gl) in zip(proposals, gts)
    ]
    pooled = model.pool(z, [s.boxes for s in samples])
    f = model.roi_feature_forward(pooled, "base")
    labels = torch.cat([s.labels for s in samples])
    l_cls = classification_loss(model.classify(f, "base"), labels)
    pred = model.regress_boxes(f, class_hint=labels)
    l_loc = box_regression_loss(pred, torch.cat([s.target_deltas for s in samples]),
                                torch.cat([s.positive for s in samples]))
    total = l_rpn + l_cls + l_loc
    _check_finite(rpn=l_rpn, cls=l_cls, loc=l_loc)

    optimizer.zero_grad(set_to_none=True)
    total.backward()
    optimizer.step()
    return LossBreakdown(l_rpn.item(), l_cls.item(), l_loc.item(), total.item())


# ---------------------------------------------------------------------------
# stage transition

def branch_surgery(model: Detector, vocab: ClassVocabulary, seed: int = 0) -> Detector:
    """Return a branched copy: novel RoI layers copied from the base ones, fresh novel classifier.

    The input model is left untouched.
    """
    if model.stage != "base":
        raise StageError("branch surgery needs a base-stage model")
    if vocab.num_base != model.num_base:
        raise ValueError(f"vocabulary has {vocab.num_base} base classes, model {model.num_base}")
    if vocab.num_novel < 1:
        raise ValueError("vocabulary has no novel classes")
    out = copy.deepcopy(model)
    out.add_novel_branch(vocab.num_novel)
    out.roi["novel"].load_state_dict(copy.deepcopy(model.roi["base"].state_dict()))
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        out.cls["novel"].W.normal_(0.0, NOVEL_HEAD_INIT_STD, generator=g)
        out.cls["novel"].b.zero_()
    out.freeze_policy = None
    for p in out.parameters():
        p.requires_grad_(True)
    return out


def apply_freeze_policy(model: Detector, policy: FreezePolicy | str) -> Detector:
    if isinstance(policy, str):
        policy = FreezePolicy(policy)
    if model.stage != "branched":
        raise StageError("freeze policies apply to branched models only")
    for name, p in model.named_parameters():
        p.requires_grad_(policy.is_trainable(name))
    model.freeze_policy = policy.finetune_layers
    return model


def trainable_names(model: Detector) -> set[str]:
    return {n for n, p in model.named_parameters() if p.requires_grad}


def finetune_step(model: Detector, optimizer: torch.optim.Optimizer, batch: Sequence[AnnotatedImage],
                  cfg: TrainConfig, step: int, generator: torch.Generator) -> float:
    """One step of joint-softmax cross-entropy on novel data; only trainable tensors move.

    RoIs with IoU >= 0.5 to a novel GT target that class, IoU < 0.3 targets the
    base head's background way, the rest are ignored.
    """
    if model.stage != "branched":
        raise StageError("fine-tuning needs a branched model")
    if model.freeze_policy is None:
        raise StageError("apply a freeze policy before fine-tuning")
    for img in batch:
        bad = [i.class_index for i in img.instances if i.class_index <= model.num_base]
        if bad:
            raise DataContractError(f"image {img.image_id} carries non-novel labels {bad}")
    _set_lr(optimizer, cfg.lr_at(step))

    with torch.no_grad():
        z = model.backbone_forward(images_to_tensor([im.pixels for im in batch]))
        proposals = model.rpn_forward(z, "train")
        samples = []
        for p, im in zip(proposals, batch):
            gb, gl = _gt_tensors(im)
            samples.append(sample_rois(p.boxes, gb, gl, model.num_base, generator, cfg.rois_per_image,
                                       cfg.positive_fraction, fg_iou=0.5, bg_iou=0.3))
        pooled = model.pool(z, [s.boxes for s in samples])
        base_logits = model.classify(model.roi_feature_forward(pooled, "base"), "base")
    novel_logits = model.classify(model.roi_feature_forward(pooled, "novel"), "novel")
    joint = torch.cat([base_logits, novel_logits], dim=1)
    loss = classification_loss(joint, torch.cat([s.labels for s in samples]))
    _check_finite(cls=loss)

    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()
