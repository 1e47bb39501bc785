"""Checkpoint archive: raw little-endian tensors plus a JSON manifest.

The file is an uncompressed zip holding ``manifest.json`` (format version,
stage, freeze policy, trainability flags, detector config and its digest,
vocabulary, metadata, per-tensor layout) and ``tensors.bin`` (the tensors
back to back). Loading verifies the version and both digests.
"""
from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from itfa.detector import Detector, DetectorConfig
from itfa.synthdata import ClassVocabulary

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable, corrupted or incompatible checkpoint file."""


@dataclass
class Checkpoint:
    model: Detector
    vocab: ClassVocabulary
    metadata: dict = field(default_factory=dict)
    path: Path | None = None

    @property
    def stage(self) -> str:
        return self.model.stage


def config_digest(cfg: DetectorConfig) -> str:
    return hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()


def save_checkpoint(model: Detector, path, vocab: ClassVocabulary, metadata: dict | None = None) -> None:
    chunks, layout = [], []
    offset = 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy()
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        layout.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.newbyteorder("<").str,
                       "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "format_version": FORMAT_VERSION,
        "stage": model.stage,
        "freeze_policy": model.freeze_policy,
        "num_base": model.num_base,
        "num_novel": model.num_novel,
        "detector_config": model.cfg.to_dict(),
        "config_digest": config_digest(model.cfg),
        "vocabulary": vocab.to_dict(),
        "trainable": {n: bool(p.requires_grad) for n, p in model.named_parameters()},
        "tensors": layout,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "metadata": metadata or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(_fixed_info("manifest.json"), json.dumps(manifest, indent=1, sort_keys=True))
        zf.writestr(_fixed_info("tensors.bin"), payload)


def _fixed_info(name: str) -> zipfile.ZipInfo:
    # constant timestamp so identical models give identical bytes
    info = zipfile.ZipInfo(name, date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    return info


def load_checkpoint(path) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            payload = zf.read("tensors.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc

    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {manifest.get('format_version')} != {FORMAT_VERSION}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: tensor payload digest mismatch")
    cfg = DetectorConfig.from_dict(manifest["detector_config"])
    if config_digest(cfg) != manifest["config_digest"]:
        raise CheckpointError(f"{path}: detector config digest mismatch")

    model = Detector(cfg, manifest["num_base"])
    if manifest["stage"] == "branched":
        model.add_novel_branch(manifest["num_novel"])
    state = {}
    for entry in manifest["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensors do not fit the declared structure ({exc})") from exc
    for name, p in model.named_parameters():
        p.requires_grad_(manifest["trainable"][name])
    model.freeze_policy = manifest["freeze_policy"]
    model.eval()
    return Checkpoint(model, ClassVocabulary.from_dict(manifest["vocabulary"]), manifest["metadata"], Path(path).resolve())
