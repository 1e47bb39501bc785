"""Detection rendering and result plots."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from itfa.evalmetrics import EvalReport  # noqa: E402
from itfa.inference import Detection  # noqa: E402
from itfa.synthdata import ClassVocabulary  # noqa: E402

# base classes in blues, novel classes in reds
BASE_COLORS = [(30, 90, 255), (0, 160, 255), (70, 70, 200), (0, 200, 230), (110, 130, 255), (40, 40, 150)]
NOVEL_COLORS = [(255, 40, 40), (255, 120, 60), (200, 30, 90), (255, 80, 150), (170, 20, 20)]

_PNG_META = {"Software": None}
plt.rcParams["svg.hashsalt"] = "itfa"


def box_color(class_index: int, vocab: ClassVocabulary) -> tuple[int, int, int]:
    if vocab.is_novel(class_index):
        return NOVEL_COLORS[vocab.novel_indices.index(class_index) % len(NOVEL_COLORS)]
    return BASE_COLORS[class_index % len(BASE_COLORS)]


def render_detections(pixels: np.ndarray, detections: Sequence[Detection], vocab: ClassVocabulary, path,
                      scale: int = 1) -> Path:
    """Draw labelled boxes (base blue, novel red) onto the image and write a PNG."""
    arr = np.clip(np.round(np.asarray(pixels) * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr, mode="RGB")
    if scale != 1:
        img = img.resize((img.width * scale, img.height * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    for d in detections:
        color = box_color(d.class_index, vocab)
        x1, y1, x2, y2 = (v * scale for v in d.box)
        draw.rectangle([x1, y1, x2 - 1, y2 - 1], outline=color, width=max(1, scale // 2))
        if scale > 1:
            draw.text((x1 + 1, max(0, y1 - 11)), f"{vocab.name_of(d.class_index)} {d.score:.2f}", fill=color)
    path = Path(path)
    try:
        img.save(path, format="PNG")
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return path


def _save(fig, path: Path) -> Path:
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curves(logs: Mapping[str, Sequence[Mapping]], path) -> Path:
    fig, axes = plt.subplots(1, len(logs), figsize=(5 * len(logs), 3.5), squeeze=False)
    for ax, (stage, records) in zip(axes[0], logs.items()):
        keys = [k for k in ("rpn", "cls", "loc", "total") if records and k in records[0]]
        steps = [r["step"] for r in records]
        for k in keys:
            ax.plot(steps, [r[k] for r in records], label=k, linewidth=0.8)
        ax.set_title(f"{stage} loss")
        ax.set_xlabel("step")
        ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def kshot_bar_data(reports: Mapping[int, EvalReport]) -> dict[str, list[float]]:
    ks = sorted(reports)
    return {"K": ks, **{f: [100 * (getattr(reports[k], f) or 0.0) for k in ks] for f in ("nAP", "bAP", "hAP")}}


def kshot_bars(reports: Mapping[int, EvalReport], path) -> Path:
    data = kshot_bar_data(reports)
    x = np.arange(len(data["K"]))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for i, f in enumerate(("nAP", "bAP", "hAP")):
        ax.bar(x + (i - 1) * 0.27, data[f], 0.27, label=f)
    ax.set_xticks(x, [f"{k}-shot" for k in data["K"]])
    ax.set_ylabel("AP (x100)")
    ax.legend()
    fig.tight_layout()
    return _save(fig, Path(path))


def ablation_heatmap(table: Mapping, path) -> Path:
    rows = table["rows"]
    ks = [str(k) for k in table["k_values"]]
    values = np.array([[100 * r["nAP"][k] for k in ks] for r in rows])
    fig, ax = plt.subplots(figsize=(1.2 * len(ks) + 3, 0.45 * len(rows) + 1.2))
    ax.imshow(values, cmap="viridis", aspect="auto")
    ax.set_xticks(range(len(ks)), [f"{k}-shot" for k in ks])
    ax.set_yticks(range(len(rows)), [f"{r['layers']}/{r['regressor']}/{r['classifier']}" for r in rows])
    for i in range(len(rows)):
        for j in range(len(ks)):
            ax.text(j, i, f"{values[i, j]:.1f}", ha="center", va="center", color="w", fontsize=8)
    fig.tight_layout()
    return _save(fig, Path(path))


def emit_plots(out_dir, logs: Mapping[str, Sequence[Mapping]] | None = None,
               reports: Mapping[int, EvalReport] | None = None, ablation: Mapping | None = None) -> list[Path]:
    """Write whichever plots the inputs allow; returns the written files."""
    if not (logs or reports or ablation):
        raise ValueError("nothing to plot")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if logs:
        written.append(loss_curves(logs, out / "loss_curves.png"))
    if reports:
        written.append(kshot_bars(reports, out / "ap_vs_k.png"))
    if ablation:
        written.append(ablation_heatmap(ablation, out / "ablation.png"))
    return written
