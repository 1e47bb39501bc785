"""Miniature two-stage detector.

Backbone -> RPN -> RoI max-pool -> two fc layers -> classifier heads plus a
box regressor. After branch surgery the RoI extractor and classifier exist
twice (``roi.base``/``roi.novel``, ``cls.base``/``cls.novel``); the backbone,
RPN and regressor are shared.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import roi_pool

from itfa import boxops

COSINE_EPS = 1e-8
DELTA_CLAMP = math.log(1000.0 / 16)


class StageError(RuntimeError):
    """Operation not valid for the model's current stage (base vs branched)."""


class DimensionError(ValueError):
    pass


@dataclass
class DetectorConfig:
    canvas: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (32, 32, 64, 64)
    anchor_scales: tuple[float, ...] = (12.0, 20.0, 32.0)
    anchor_ratios: tuple[float, ...] = (0.7, 1.4)
    pool_size: int = 4
    roi_dim: int = 128
    classifier: str = "linear"
    cosine_scale: float = 20.0
    regressor: str = "agnostic"
    rpn_pre_nms_train: int = 300
    rpn_post_nms_train: int = 64
    rpn_pre_nms_eval: int = 200
    rpn_post_nms_eval: int = 50
    rpn_nms_iou: float = 0.7
    nms_iou: float = 0.5
    score_threshold: float = 0.05
    max_detections: int = 100

    def __post_init__(self):
        self.canvas = tuple(self.canvas)
        self.backbone_channels = tuple(self.backbone_channels)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        if self.cosine_scale <= 0:
            raise ValueError("cosine scale must be positive")
        if self.pool_size < 2:
            raise ValueError("pool size must be >= 2")
        if self.roi_dim < 8:
            raise ValueError("roi feature width must be >= 8")
        if self.classifier not in ("linear", "cosine"):
            raise ValueError(f"unknown classifier mode {self.classifier!r}")
        if self.regressor not in ("agnostic", "specific"):
            raise ValueError(f"unknown regressor mode {self.regressor!r}")
        if len(self.backbone_channels) != 4:
            raise ValueError("backbone has exactly 4 blocks")

    @property
    def stride(self) -> int:
        return 8

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# box coding

def encode_boxes(gt: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """(dx, dy, dw, dh) deltas taking ``ref`` boxes onto ``gt`` boxes."""
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = gt[:, 0] + 0.5 * gw, gt[:, 1] + 0.5 * gh
    return torch.stack([(gx - rx) / rw, (gy - ry) / rh, torch.log(gw / rw), torch.log(gh / rh)], dim=1)


def decode_boxes(deltas: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    rw, rh = ref[:, 2] - ref[:, 0], ref[:, 3] - ref[:, 1]
    rx, ry = ref[:, 0] + 0.5 * rw, ref[:, 1] + 0.5 * rh
    dx, dy = deltas[:, 0], deltas[:, 1]
    dw = deltas[:, 2].clamp(max=DELTA_CLAMP)
    dh = deltas[:, 3].clamp(max=DELTA_CLAMP)
    cx, cy = rx + dx * rw, ry + dy * rh
    w, h = rw * torch.exp(dw), rh * torch.exp(dh)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1)


def clip_boxes(boxes: torch.Tensor, canvas: tuple[int, int]) -> torch.Tensor:
    H, W = canvas
    return torch.stack(
        [boxes[:, 0].clamp(0, W), boxes[:, 1].clamp(0, H), boxes[:, 2].clamp(0, W), boxes[:, 3].clamp(0, H)], dim=1
    )


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.maximum(a[:, None, :2], b[None, :, :2])
    rb = torch.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def generate_anchors(cfg: DetectorConfig) -> torch.Tensor:
    """Anchors ordered (row, col, scale, ratio), matching the RPN output layout."""
    H, W = cfg.canvas
    s = cfg.stride
    fh, fw = H // s, W // s
    shapes = []
    for scale in cfg.anchor_scales:
        for ratio in cfg.anchor_ratios:  # ratio = h / w
            w = scale / math.sqrt(ratio)
            h = scale * math.sqrt(ratio)
            shapes.append((w, h))
    wh = torch.tensor(shapes, dtype=torch.float32)
    cy = (torch.arange(fh, dtype=torch.float32) + 0.5) * s
    cx = (torch.arange(fw, dtype=torch.float32) + 0.5) * s
    cyy, cxx = torch.meshgrid(cy, cx, indexing="ij")
    centers = torch.stack([cxx, cyy], dim=-1).reshape(-1, 1, 2)
    half = wh.reshape(1, -1, 2) / 2
    return torch.cat([centers - half, centers + half], dim=-1).reshape(-1, 4)


# ---------------------------------------------------------------------------
# heads

def classify_linear(f: torch.Tensor, W: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return f @ W.t() + b


def classify_cosine(f: torch.Tensor, W: torch.Tensor, scale: float, eps: float = COSINE_EPS) -> torch.Tensor:
    """``scale * <w_j, f> / (|w_j| |f| + eps)``; an all-zero ``f`` gives zero logits."""
    denom = f.norm(dim=-1, keepdim=True) * W.norm(dim=-1)[None, :] + eps
    return scale * (f @ W.t()) / denom


class Dense(nn.Module):
    """Fully connected layer with parameters named ``W`` (out x in) and ``b``."""

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.W = nn.Parameter(torch.zeros(out_features, in_features))
        self.b = nn.Parameter(torch.zeros(out_features))

    def forward(self, x):
        return F.linear(x, self.W, self.b)


class RoIExtractor(nn.Module):
    def __init__(self, in_features: int, dim: int):
        super().__init__()
        self.fc1 = Dense(in_features, dim)
        self.fc2 = Dense(dim, dim)

    def forward(self, pooled):
        return F.relu(self.fc2(F.relu(self.fc1(pooled.flatten(1)))))


class _Block(nn.Sequential):
    def __init__(self, cin, cout, stride):
        super().__init__(
            nn.Conv2d(cin, cout, 3, stride, 1),
            nn.GroupNorm(min(8, cout), cout),
            nn.ReLU(inplace=True),
        )


class RPNHead(nn.Module):
    def __init__(self, channels: int, num_anchors: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, 1, 1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, 1)

    def forward(self, z):
        h = F.relu(self.conv(z))
        B = z.shape[0]
        obj = self.objectness(h).permute(0, 2, 3, 1).reshape(B, -1)
        deltas = self.deltas(h).permute(0, 2, 3, 1).reshape(B, -1, 4)
        return obj, deltas


class Proposals(NamedTuple):
    boxes: torch.Tensor  # (R, 4)
    objectness: torch.Tensor  # (R,)


class BranchOutputs(NamedTuple):
    p_base_logits: torch.Tensor  # (R, |base|+1)
    p_novel_logits: torch.Tensor | None  # (R, |novel|)
    box_deltas: torch.Tensor  # (R, 4) or (R, |base|+1, 4)
    probabilities: torch.Tensor | None  # softmax over the concatenated logits


class Detector(nn.Module):
    """Faster-R-CNN-shaped detector whose parameter names follow the branch layout.

    ``backbone.*``, ``rpn.*``, ``roi.base.fc{1,2}.{W,b}``, ``cls.base.{W,b}``,
    ``reg.{W,b}`` and, once branched, ``roi.novel.*`` and ``cls.novel.*``.
    """

    def __init__(self, cfg: DetectorConfig, num_base: int, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.num_base = num_base
        self.num_novel = 0
        self.freeze_policy: str | None = None
        ch = cfg.backbone_channels
        self.backbone = nn.Sequential(
            _Block(3, ch[0], 1), _Block(ch[0], ch[1], 2), _Block(ch[1], ch[2], 2), _Block(ch[2], ch[3], 2)
        )
        self.rpn = RPNHead(ch[3], cfg.num_anchors)
        feat_in = ch[3] * cfg.pool_size * cfg.pool_size
        self.roi = nn.ModuleDict({"base": RoIExtractor(feat_in, cfg.roi_dim)})
        self.cls = nn.ModuleDict({"base": Dense(cfg.roi_dim, num_base + 1)})
        reg_out = 4 if cfg.regressor == "agnostic" else 4 * (num_base + 1)
        self.reg = Dense(cfg.roi_dim, reg_out)
        self.register_buffer("anchors", generate_anchors(cfg), persistent=False)
        self._init_weights(seed)

    def _init_weights(self, seed: int):
        g = torch.Generator().manual_seed(seed)
        for name, p in self.named_parameters():
            if name.endswith("bias") or name.endswith(".b"):
                nn.init.zeros_(p)
            elif name.startswith("backbone") and p.dim() == 4:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                nn.init.normal_(p, 0.0, math.sqrt(2.0 / fan_in), generator=g)
            elif name.startswith("backbone"):
                nn.init.ones_(p)  # GroupNorm gains
            elif name.startswith("roi"):
                nn.init.normal_(p, 0.0, math.sqrt(2.0 / p.shape[1]), generator=g)
            elif name.startswith("reg"):
                nn.init.normal_(p, 0.0, 0.001, generator=g)
            else:
                nn.init.normal_(p, 0.0, 0.01, generator=g)

    # -- structure -----------------------------------------------------------

    @property
    def stage(self) -> str:
        return "branched" if "novel" in self.roi else "base"

    @property
    def joint_width(self) -> int:
        return self.num_base + 1 + self.num_novel

    def add_novel_branch(self, num_novel: int) -> None:
        """Create zero-filled novel RoI layers and classifier; surgery gives them values."""
        if self.stage == "branched":
            raise StageError("model is already branched")
        feat_in = self.cfg.backbone_channels[3] * self.cfg.pool_size**2
        self.roi["novel"] = RoIExtractor(feat_in, self.cfg.roi_dim)
        self.cls["novel"] = Dense(self.cfg.roi_dim, num_novel)
        self.num_novel = num_novel

    # -- forward pieces ------------------------------------------------------

    def backbone_forward(self, images: torch.Tensor) -> torch.Tensor:
        """Images (B, H, W, 3) or (B, 3, H, W) in [0, 1] -> feature map (B, C, H/8, W/8)."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.dim() != 4:
            raise DimensionError(f"expected a 4-D image batch, got shape {tuple(images.shape)}")
        if images.shape[-1] == 3 and images.shape[1] != 3:
            images = images.permute(0, 3, 1, 2)
        if tuple(images.shape[1:]) != (3, *self.cfg.canvas):
            raise DimensionError(f"image shape {tuple(images.shape[1:])} != (3, {self.cfg.canvas})")
        return self.backbone(images.contiguous())

    @torch.no_grad()
    def propose(self, obj: torch.Tensor, deltas: torch.Tensor, mode: str = "eval") -> list[Proposals]:
        """Decode, clip, drop tiny boxes, keep top-N by objectness, then NMS."""
        cfg = self.cfg
        pre, post = (
            (cfg.rpn_pre_nms_train, cfg.rpn_post_nms_train) if mode == "train"
            else (cfg.rpn_pre_nms_eval, cfg.rpn_post_nms_eval)
        )
        out = []
        for b in range(obj.shape[0]):
            boxes = clip_boxes(decode_boxes(deltas[b], self.anchors), cfg.canvas)
            scores = obj[b]
            ok = ((boxes[:, 2] - boxes[:, 0]) >= 1.0) & ((boxes[:, 3] - boxes[:, 1]) >= 1.0)
            boxes, scores = boxes[ok], scores[ok]
            order = torch.argsort(scores, descending=True, stable=True)[:pre]
            boxes, scores = boxes[order], scores[order]
            keep = boxops.nms(boxes.double().numpy(), scores.double().numpy(), cfg.rpn_nms_iou)[:post]
            keep = torch.from_numpy(keep)
            out.append(Proposals(boxes[keep], scores[keep]))
        return out

    def rpn_forward(self, z: torch.Tensor, mode: str = "eval") -> list[Proposals]:
        obj, deltas = self.rpn(z)
        return self.propose(obj, deltas, mode)

    def pool(self, z: torch.Tensor, boxes: list[torch.Tensor]) -> torch.Tensor:
        rois = torch.cat(
            [torch.cat([torch.full((len(bx), 1), float(i)), bx], dim=1) for i, bx in enumerate(boxes)], dim=0
        )
        return roi_pool(z, rois, self.cfg.pool_size, 1.0 / self.cfg.stride)

    def roi_feature_forward(self, pooled: torch.Tensor, branch: str = "base") -> torch.Tensor:
        if branch not in ("base", "novel"):
            raise ValueError(f"unknown branch {branch!r}")
        if branch == "novel" and self.stage != "branched":
            raise StageError("novel branch requested on a base-stage model")
        return self.roi[branch](pooled)

    def classify(self, f: torch.Tensor, head: str = "base") -> torch.Tensor:
        if head == "novel" and self.stage != "branched":
            raise StageError("novel head requested on a base-stage model")
        layer = self.cls[head]
        if self.cfg.classifier == "cosine":
            return classify_cosine(f, layer.W, self.cfg.cosine_scale)
        return classify_linear(f, layer.W, layer.b)

    def regress_boxes(self, f: torch.Tensor, class_hint=None) -> torch.Tensor:
        """Box deltas per RoI.

        Agnostic mode ignores ``class_hint`` and returns ``(R, 4)``. Specific
        mode needs a hint per RoI; novel classes have no regressor rows and get
        the identity delta.
        """
        out = self.reg(f)
        if self.cfg.regressor == "agnostic":
            return out
        if class_hint is None:
            raise ValueError("class-specific regressor needs a class_hint")
        per_class = out.reshape(len(f), self.num_base + 1, 4)
        hint = torch.as_tensor(class_hint, dtype=torch.long).expand(len(f))
        rows = hint.clamp(max=self.num_base)
        picked = per_class[torch.arange(len(f)), rows]
        return torch.where((hint > self.num_base)[:, None], torch.zeros_like(picked), picked)

    def all_class_deltas(self, f: torch.Tensor) -> torch.Tensor:
        out = self.reg(f)
        if self.cfg.regressor == "agnostic":
            return out
        return out.reshape(len(f), self.num_base + 1, 4)

    def joint_predict(self, z: torch.Tensor, proposals: list[torch.Tensor]) -> BranchOutputs:
        """Base and novel logits for every proposal, joined by one softmax."""
        if self.stage != "branched":
            raise StageError("joint prediction needs a branched model")
        pooled = self.pool(z, proposals)
        return self.predict_pooled(pooled)

    def predict_pooled(self, pooled: torch.Tensor) -> BranchOutputs:
        f_base = self.roi_feature_forward(pooled, "base")
        base_logits = self.classify(f_base, "base")
        deltas = self.all_class_deltas(f_base)
        if self.stage != "branched":
            return BranchOutputs(base_logits, None, deltas, torch.softmax(base_logits, dim=1))
        f_novel = self.roi_feature_forward(pooled, "novel")
        novel_logits = self.classify(f_novel, "novel")
        joint = torch.cat([base_logits, novel_logits], dim=1)
        return BranchOutputs(base_logits, novel_logits, deltas, torch.softmax(joint, dim=1))


def images_to_tensor(images) -> torch.Tensor:
    """Stack (H, W, 3) arrays into a (B, 3, H, W) float32 tensor."""
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
