"""Synthetic shape scenes, COCO-format annotation I/O and K-shot sampling.

Every class is a geometric shape with its own color family, so a tiny
backbone can tell them apart. Scenes are pure functions of their seed.
"""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from matplotlib.path import Path as _PolyPath

from itfa import boxops

BASE_SHAPES = ("circle", "square", "triangle", "ring", "cross", "star")
NOVEL_SHAPES = ("pentagon", "crescent", "diamond")

BACKGROUND_FILL = {"standard": 0.0, "shifted": 0.35}
MIN_SHAPE_SIZE = 12
MAX_PAIR_IOU = 0.3


class PlacementError(ValueError):
    """The canvas cannot host a shape at the minimum size."""


class DatasetConfigError(ValueError):
    pass


class SupportSetError(ValueError):
    def __init__(self, class_name: str, available: int, k: int):
        super().__init__(f"class {class_name!r} has {available} instances in the pool, {k} requested")
        self.class_name = class_name
        self.available = available
        self.k = k


class CocoFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ClassVocabulary:
    """Joint label space: base ways, then background, then novel ways."""

    base_classes: tuple[str, ...]
    novel_classes: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(self.novel_classes))
        names = self.base_classes + self.novel_classes
        if len(set(names)) != len(names):
            raise ValueError("base and novel class names must be distinct")

    @property
    def background_index(self) -> int:
        return len(self.base_classes)

    @property
    def num_base(self) -> int:
        return len(self.base_classes)

    @property
    def num_novel(self) -> int:
        return len(self.novel_classes)

    @property
    def joint_width(self) -> int:
        return self.num_base + 1 + self.num_novel

    @property
    def base_indices(self) -> list[int]:
        return list(range(self.num_base))

    @property
    def novel_indices(self) -> list[int]:
        return [self.num_base + 1 + j for j in range(self.num_novel)]

    @property
    def class_indices(self) -> list[int]:
        return self.base_indices + self.novel_indices

    def index_of(self, name: str) -> int:
        if name in self.base_classes:
            return self.base_classes.index(name)
        if name in self.novel_classes:
            return self.num_base + 1 + self.novel_classes.index(name)
        raise KeyError(name)

    def name_of(self, index: int) -> str:
        if 0 <= index < self.num_base:
            return self.base_classes[index]
        j = index - self.num_base - 1
        if 0 <= j < self.num_novel:
            return self.novel_classes[j]
        raise KeyError(f"index {index} is not a class of this vocabulary")

    def is_novel(self, index: int) -> bool:
        return index > self.background_index

    def to_dict(self) -> dict:
        return {"base_classes": list(self.base_classes), "novel_classes": list(self.novel_classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassVocabulary":
        return cls(tuple(d["base_classes"]), tuple(d.get("novel_classes", ())))


@dataclass(frozen=True)
class Instance:
    class_index: int
    box: tuple[float, float, float, float]


@dataclass
class AnnotatedImage:
    pixels: np.ndarray | None  # (H, W, 3) float32 in [0, 1]
    instances: list[Instance]
    image_id: int
    seed: int
    height: int = 0
    width: int = 0

    def __post_init__(self):
        if self.pixels is not None:
            self.height, self.width = self.pixels.shape[:2]

    def boxes(self) -> np.ndarray:
        return np.asarray([i.box for i in self.instances], dtype=np.float64).reshape(-1, 4)

    def labels(self) -> np.ndarray:
        return np.asarray([i.class_index for i in self.instances], dtype=np.int64)


@dataclass
class DatasetSplit:
    base_train: list[AnnotatedImage]
    novel_pool: list[AnnotatedImage]
    test: list[AnnotatedImage]
    vocabulary: ClassVocabulary
    shifted_test: list[AnnotatedImage] = field(default_factory=list)


@dataclass
class SupportSet:
    shots_per_class: int
    items: list[AnnotatedImage]
    seed: int


@dataclass
class DatasetConfig:
    base_classes: tuple[str, ...] = BASE_SHAPES
    novel_classes: tuple[str, ...] = NOVEL_SHAPES
    n_base_train: int = 200
    n_novel_pool: int = 60
    n_test: int = 50
    n_shifted_test: int = 0
    canvas: tuple[int, int] = (64, 64)
    max_instances: int = 3
    max_k: int = 10
    seed: int = 1

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_classes"] = list(self.base_classes)
        d["novel_classes"] = list(self.novel_classes)
        d["canvas"] = list(self.canvas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        d = dict(d)
        for key in ("base_classes", "novel_classes", "canvas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# rendering

def _polygon(vertices: Sequence[tuple[float, float]]) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    path = _PolyPath(np.asarray(vertices))

    def inside(u, v):
        pts = np.column_stack([u.ravel(), v.ravel()])
        return path.contains_points(pts).reshape(u.shape)

    return inside


def _regular(n: int, radius_fn=lambda k: 1.0) -> list[tuple[float, float]]:
    angles = -np.pi / 2 + np.arange(n) * 2 * np.pi / n
    return [(radius_fn(k) * np.cos(a), radius_fn(k) * np.sin(a)) for k, a in enumerate(angles)]


_MASKS: dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    "circle": lambda u, v: u**2 + v**2 <= 1.0,
    "square": lambda u, v: (np.abs(u) <= 0.9) & (np.abs(v) <= 0.9),
    "triangle": lambda u, v: (v <= 1.0) & (np.abs(u) <= (v + 1.0) / 2.0),
    "ring": lambda u, v: (u**2 + v**2 <= 1.0) & (u**2 + v**2 >= 0.3),
    "cross": lambda u, v: ((np.abs(u) <= 0.33) & (np.abs(v) <= 1.0)) | ((np.abs(v) <= 0.33) & (np.abs(u) <= 1.0)),
    "star": _polygon(_regular(10, lambda k: 1.0 if k % 2 == 0 else 0.42)),
    "pentagon": _polygon(_regular(5)),
    "crescent": lambda u, v: (u**2 + v**2 <= 1.0) & ((u - 0.55) ** 2 + v**2 > 0.7**2),
    "diamond": lambda u, v: np.abs(u) + np.abs(v) <= 1.0,
}

_COLORS = {
    "circle": (0.90, 0.20, 0.20),
    "square": (0.20, 0.80, 0.25),
    "triangle": (0.25, 0.35, 0.95),
    "ring": (0.95, 0.85, 0.15),
    "cross": (0.80, 0.25, 0.85),
    "star": (0.15, 0.80, 0.85),
    "pentagon": (1.00, 0.55, 0.10),
    "crescent": (0.60, 0.95, 0.60),
    "diamond": (0.95, 0.95, 0.95),
}


def shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask of ``shape`` inscribed in an h x w box."""
    v, u = np.meshgrid(
        (np.arange(h) + 0.5) / h * 2.0 - 1.0,
        (np.arange(w) + 0.5) / w * 2.0 - 1.0,
        indexing="ij",
    )
    try:
        return _MASKS[shape](u, v)
    except KeyError:
        raise ValueError(f"no renderer for class {shape!r}") from None


def _class_color(name: str) -> tuple[float, float, float]:
    if name in _COLORS:
        return _COLORS[name]
    # unseen names get a stable color derived from the name
    rng = np.random.default_rng(sum(ord(c) * (i + 1) for i, c in enumerate(name)))
    return tuple(rng.uniform(0.2, 1.0, size=3))


def _shape_for(name: str) -> str:
    return name if name in _MASKS else "circle"


def generate_scene(
    seed: int,
    vocab: ClassVocabulary,
    canvas: tuple[int, int] = (64, 64),
    allowed_classes: Iterable[int] | None = None,
    max_instances: int = 3,
    *,
    image_id: int = 0,
    must_include: Sequence[int] = (),
    style: str = "standard",
) -> AnnotatedImage:
    """Render a scene whose shapes match its instance annotations exactly.

    Boxes are the tight pixel bounds of each rendered shape. Shapes never share
    pixels and pairwise box IoU stays below 0.3.
    """
    H, W = canvas
    allowed = sorted(set(vocab.class_indices if allowed_classes is None else allowed_classes))
    if not allowed:
        raise ValueError("allowed_classes must be nonempty")
    if max_instances < 1:
        raise ValueError("max_instances must be >= 1")
    if H < 32 or W < 32:
        raise PlacementError(f"canvas {H}x{W} is smaller than the 32x32 minimum")
    if style not in BACKGROUND_FILL:
        raise ValueError(f"unknown style {style!r}")
    max_size = int(min(H, W) * 0.45)
    if max_size < MIN_SHAPE_SIZE:
        raise PlacementError(f"canvas {H}x{W} cannot hold a {MIN_SHAPE_SIZE}px shape")

    rng = np.random.default_rng(seed)
    bg = BACKGROUND_FILL[style]
    pixels = np.full((H, W, 3), bg, dtype=np.float64)
    occupied = np.zeros((H, W), dtype=bool)
    n_target = int(rng.integers(1, max_instances + 1))
    n_target = max(n_target, len(must_include))
    queue = list(must_include) + [int(rng.choice(allowed)) for _ in range(n_target - len(must_include))]

    instances: list[Instance] = []
    boxes: list[tuple[float, float, float, float]] = []
    for cls_idx in queue:
        name = vocab.name_of(cls_idx)
        for _ in range(60):
            size = rng.uniform(MIN_SHAPE_SIZE, max_size)
            aspect = np.exp(rng.uniform(-0.2, 0.2))
            w = int(round(min(size * aspect, W - 2)))
            h = int(round(min(size / aspect, H - 2)))
            x0 = int(rng.integers(1, W - w))
            y0 = int(rng.integers(1, H - h))
            mask = shape_mask(_shape_for(name), h, w)
            ys, xs = np.nonzero(mask)
            box = (float(x0 + xs.min()), float(y0 + ys.min()), float(x0 + xs.max() + 1), float(y0 + ys.max() + 1))
            region = occupied[y0 : y0 + h, x0 : x0 + w]
            if (region & mask).any():
                continue
            if boxes and boxops.iou_matrix([box], boxes).max() >= MAX_PAIR_IOU:
                continue
            break
        else:
            continue
        base_color = np.asarray(_class_color(name))
        color = np.clip(base_color + rng.uniform(-0.08, 0.08, size=3), 0.05, 1.0)
        shade = color * (1.0 + rng.uniform(-0.06, 0.06, size=(h, w, 1)))
        patch = pixels[y0 : y0 + h, x0 : x0 + w]
        patch[mask] = np.clip(shade[mask], 0.05, 1.0)
        if style == "shifted":
            # keep shape pixels distinct from the grey background fill
            same = np.all(np.abs(patch - bg) < 1e-3, axis=-1) & mask
            patch[same] = bg + 0.1
        region |= mask
        instances.append(Instance(cls_idx, box))
        boxes.append(box)

    if not instances:
        raise PlacementError(f"could not place any shape on a {H}x{W} canvas")
    return AnnotatedImage(pixels.astype(np.float32), instances, image_id, seed)


# ---------------------------------------------------------------------------
# datasets

_SPLIT_CODES = {"base_train": 0, "novel_pool": 1, "test": 2, "shifted_test": 3}


def derive_seed(master: int, split: str, index: int) -> int:
    return int(np.random.SeedSequence([master, _SPLIT_CODES[split], index]).generate_state(1)[0])


def count_instances(images: Iterable[AnnotatedImage]) -> Counter:
    return Counter(inst.class_index for img in images for inst in img.instances)


def build_dataset(config: DatasetConfig) -> DatasetSplit:
    vocab = ClassVocabulary(config.base_classes, config.novel_classes)
    next_id = 0

    def make(split: str, n: int, allowed: list[int], style="standard", cover=()):
        nonlocal next_id
        images = []
        for i in range(n):
            must = (cover[i],) if i < len(cover) else ()
            images.append(
                generate_scene(
                    derive_seed(config.seed, split, i), vocab, config.canvas, allowed,
                    config.max_instances, image_id=next_id, must_include=must, style=style,
                )
            )
            next_id += 1
        return images

    all_cls = vocab.class_indices
    split = DatasetSplit(
        base_train=make("base_train", config.n_base_train, vocab.base_indices),
        novel_pool=make("novel_pool", config.n_novel_pool, vocab.novel_indices),
        test=make("test", config.n_test, all_cls, cover=all_cls if config.n_test >= len(all_cls) else ()),
        vocabulary=vocab,
        shifted_test=make("shifted_test", config.n_shifted_test, vocab.novel_indices, "shifted",
                          cover=vocab.novel_indices),
    )
    counts = count_instances(split.novel_pool)
    for idx in vocab.novel_indices:
        if counts[idx] < config.max_k:
            raise DatasetConfigError(
                f"novel pool has {counts[idx]} instances of {vocab.name_of(idx)!r}, "
                f"fewer than the maximum K={config.max_k}"
            )
    return split


def sample_support_set(pool: Sequence[AnnotatedImage], k: int, seed: int, vocab: ClassVocabulary) -> SupportSet:
    """Pick exactly ``k`` instances of every novel class, uniformly without replacement.

    Images keep only their selected instances; everything else is stripped from
    the support annotations.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    rng = np.random.default_rng(seed)
    chosen: dict[int, list[int]] = {}
    for cls_idx in vocab.novel_indices:
        refs = [(i, j) for i, img in enumerate(pool) for j, inst in enumerate(img.instances)
                if inst.class_index == cls_idx]
        if len(refs) < k:
            raise SupportSetError(vocab.name_of(cls_idx), len(refs), k)
        for r in rng.choice(len(refs), size=k, replace=False):
            i, j = refs[int(r)]
            chosen.setdefault(i, []).append(j)
    items = []
    for i in sorted(chosen):
        img = pool[i]
        keep = sorted(chosen[i])
        items.append(AnnotatedImage(img.pixels, [img.instances[j] for j in keep], img.image_id, img.seed))
    return SupportSet(k, items, seed)


# ---------------------------------------------------------------------------
# COCO-format annotation I/O

def write_coco_annotations(images: Sequence[AnnotatedImage], vocab: ClassVocabulary, path) -> None:
    categories = [{"id": idx, "name": vocab.name_of(idx), "supercategory": "novel" if vocab.is_novel(idx) else "base"}
                  for idx in vocab.class_indices]
    coco_images, annotations = [], []
    ann_id = 1
    for img in images:
        coco_images.append({"id": img.image_id, "width": img.width, "height": img.height,
                            "file_name": f"{img.image_id:06d}.png", "seed": img.seed})
        for inst in img.instances:
            x1, y1, x2, y2 = inst.box
            annotations.append({"id": ann_id, "image_id": img.image_id, "category_id": inst.class_index,
                                "bbox": [x1, y1, x2 - x1, y2 - y1], "area": (x2 - x1) * (y2 - y1), "iscrowd": 0})
            ann_id += 1
    doc = {"images": coco_images, "annotations": annotations, "categories": categories,
           "info": {"base_classes": list(vocab.base_classes), "novel_classes": list(vocab.novel_classes)}}
    Path(path).write_text(json.dumps(doc, indent=1))


def read_coco_annotations(path) -> tuple[ClassVocabulary, list[AnnotatedImage]]:
    """Parse a COCO document into a vocabulary and pixel-less annotated images.

    ``bbox`` entries are ``(x, y, w, h)`` and come back as ``(x1, y1, x2, y2)``.
    """
    doc = json.loads(Path(path).read_text())
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise CocoFormatError(f"missing top-level key {key!r}")
    cats = {c["id"]: c for c in doc["categories"]}
    info = doc.get("info", {})
    if "base_classes" in info:
        vocab = ClassVocabulary(tuple(info["base_classes"]), tuple(info.get("novel_classes", ())))
    else:
        base = [c["name"] for c in doc["categories"] if c.get("supercategory") != "novel"]
        novel = [c["name"] for c in doc["categories"] if c.get("supercategory") == "novel"]
        vocab = ClassVocabulary(tuple(base), tuple(novel))

    by_image: dict[int, AnnotatedImage] = {}
    for rec in doc["images"]:
        img = AnnotatedImage(None, [], int(rec["id"]), int(rec.get("seed", 0)),
                             int(rec.get("height", 0)), int(rec.get("width", 0)))
        by_image[img.image_id] = img
    for ann in doc["annotations"]:
        aid = ann.get("id")
        cat = cats.get(ann["category_id"])
        if cat is None:
            raise CocoFormatError(f"annotation {aid}: category_id {ann['category_id']} not in categories")
        x, y, w, h = (float(v) for v in ann["bbox"])
        if w <= 0 or h <= 0:
            raise CocoFormatError(f"annotation {aid}: degenerate bbox {ann['bbox']}")
        if ann["image_id"] not in by_image:
            raise CocoFormatError(f"annotation {aid}: unknown image_id {ann['image_id']}")
        by_image[ann["image_id"]].instances.append(Instance(vocab.index_of(cat["name"]), (x, y, x + w, y + h)))
    return vocab, list(by_image.values())


# ---------------------------------------------------------------------------
# on-disk datasets: one COCO document plus one pixel archive per split

_SPLITS = ("base_train", "novel_pool", "test", "shifted_test")


def save_dataset(split: DatasetSplit, directory, config: DatasetConfig | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in _SPLITS:
        images = getattr(split, name)
        write_coco_annotations(images, split.vocabulary, d / f"{name}.json")
        np.savez(d / f"{name}_pixels.npz", **{str(img.image_id): img.pixels for img in images})
    if config is not None:
        (d / "dataset_config.json").write_text(json.dumps(config.to_dict(), indent=1))


def load_split_images(directory, name: str) -> tuple[ClassVocabulary, list[AnnotatedImage]]:
    d = Path(directory)
    vocab, images = read_coco_annotations(d / f"{name}.json")
    pix_file = d / f"{name}_pixels.npz"
    if pix_file.exists():
        with np.load(pix_file) as arrays:
            for img in images:
                img.pixels = arrays[str(img.image_id)]
                img.height, img.width = img.pixels.shape[:2]
    return vocab, images


def load_dataset(directory) -> DatasetSplit:
    parts = {}
    vocab = None
    for name in _SPLITS:
        if (Path(directory) / f"{name}.json").exists():
            vocab, parts[name] = load_split_images(directory, name)
    if vocab is None:
        raise FileNotFoundError(f"no dataset found in {directory}")
    return DatasetSplit(parts.get("base_train", []), parts.get("novel_pool", []), parts.get("test", []),
                        vocab, parts.get("shifted_test", []))
