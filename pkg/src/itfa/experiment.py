"""Experiment orchestration: base training, fine-tuning runs, evaluation, ablation grid, audits."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from itfa.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from itfa.detector import Detector, DetectorConfig
from itfa.evalmetrics import EvalReport, evaluate, multi_seed_mean, standard_error
from itfa.inference import detect_all
from itfa.synthdata import (
    AnnotatedImage,
    ClassVocabulary,
    DatasetConfig,
    DatasetSplit,
    build_dataset,
    load_dataset,
    sample_support_set,
)
from itfa.training import (
    FreezePolicy,
    NonFiniteLossError,
    TrainConfig,
    apply_freeze_policy,
    base_train_step,
    branch_surgery,
    finetune_step,
    iterate_batches,
    make_optimizer,
    trainable_names,
)

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "ITFA_OUTPUT_ROOT"
CROSS_DOMAIN_NOTE = "novel-only evaluation on a shifted synthetic style (desk-scale stand-in for a cross-dataset test)"


class DependencyError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    dataset_dir: str | None = None
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    base_train: TrainConfig = field(default_factory=TrainConfig.base_default)
    finetune: TrainConfig = field(default_factory=TrainConfig.finetune_default)
    policy: str = "fc2"
    k_values: tuple[int, ...] = (1, 5, 10)
    seeds: tuple[int, ...] = tuple(range(10))
    eval_mode: str = "joint"
    output_dir: str = "runs"

    def __post_init__(self):
        self.k_values = tuple(int(k) for k in self.k_values)
        self.seeds = tuple(int(s) for s in self.seeds)
        if any(k < 1 for k in self.k_values):
            raise ValueError("K values must be >= 1")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.eval_mode not in ("joint", "novel_only"):
            raise ValueError(f"unknown eval mode {self.eval_mode!r}")
        FreezePolicy(self.policy)
        if self.dataset_dir is not None and not Path(self.dataset_dir).exists():
            raise FileNotFoundError(f"dataset directory {self.dataset_dir} does not exist")

    @property
    def output_root(self) -> Path:
        return Path(os.environ.get(OUTPUT_ROOT_ENV) or self.output_dir)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "dataset_dir": self.dataset_dir,
            "detector": self.detector.to_dict(),
            "base_train": self.base_train.to_dict(),
            "finetune": self.finetune.to_dict(),
            "policy": self.policy,
            "k_values": list(self.k_values),
            "seeds": list(self.seeds),
            "eval_mode": self.eval_mode,
            "output_dir": self.output_dir,
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        if "dataset" in d:
            kw["dataset"] = DatasetConfig.from_dict(d.pop("dataset"))
        if "detector" in d:
            kw["detector"] = DetectorConfig.from_dict(d.pop("detector"))
        if "base_train" in d:
            kw["base_train"] = TrainConfig.base_default(**d.pop("base_train"))
        if "finetune" in d:
            kw["finetune"] = TrainConfig.finetune_default(**d.pop("finetune"))
        return cls(**kw, **d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# audited data access

class AuditedSplit:
    """Read-through view of a DatasetSplit that counts accesses per split.

    Fine-tuning receives only this view, so ``reads['base_train']`` proves
    whether base training images were touched.
    """

    _FIELDS = ("base_train", "novel_pool", "test", "shifted_test")

    def __init__(self, split: DatasetSplit):
        self._split = split
        self.reads: Counter = Counter()

    @property
    def vocabulary(self) -> ClassVocabulary:
        return self._split.vocabulary

    def __getattr__(self, name):
        if name in AuditedSplit._FIELDS:
            self.reads[name] += 1
            return getattr(self._split, name)
        raise AttributeError(name)


def load_split(config: ExperimentConfig) -> DatasetSplit:
    if config.dataset_dir is not None:
        return load_dataset(config.dataset_dir)
    return build_dataset(config.dataset)


# ---------------------------------------------------------------------------
# evaluation

def run_eval(model: Detector, images: Sequence[AnnotatedImage], vocab: ClassVocabulary,
             mode: str = "joint", groups: Mapping[str, Sequence[str]] | None = None) -> EvalReport:
    """Detect on ``images`` and score them.

    ``novel_only`` keeps only novel GT and detections and reports nAP/nAP50;
    ``base_only`` is the base-class view used after base training.
    """
    if len(images) == 0:
        raise ValueError("cannot evaluate a split with zero images")
    model.eval()
    report = evaluate(detect_all(images, model, vocab), images, vocab, mode, extra_groups=groups)
    if mode == "novel_only":
        report.note = CROSS_DOMAIN_NOTE
    return report


# ---------------------------------------------------------------------------
# base stage

@dataclass
class BaseRunResult:
    model: Detector
    vocab: ClassVocabulary
    log: list[dict]
    report: EvalReport
    initial_report: EvalReport | None
    checkpoint_path: Path | None


def run_base_training(config: ExperimentConfig, split: DatasetSplit | None = None, out_dir=None,
                      evaluate_initial: bool = True, progress_every: int = 0) -> BaseRunResult:
    """Train the base detector; log every step's loss components; evaluate base classes."""
    split = split if split is not None else load_split(config)
    vocab = split.vocabulary
    tc = config.base_train
    model = Detector(config.detector, vocab.num_base, seed=tc.seed)
    initial = None
    if evaluate_initial:
        initial = run_eval(model, split.test, vocab, "base_only")
    model.train()
    optimizer = make_optimizer(model, tc)
    generator = torch.Generator().manual_seed(tc.seed)
    batches = iterate_batches(split.base_train, tc.batch_size, tc.seed)
    out_dir = Path(out_dir) if out_dir is not None else None

    records: list[dict] = []
    last_good, last_good_step = copy.deepcopy(model.state_dict()), 0
    t0 = time.perf_counter()
    for step in range(tc.steps):
        try:
            losses = base_train_step(model, optimizer, next(batches), tc, step, generator)
        except NonFiniteLossError as exc:
            if out_dir is not None:
                model.load_state_dict(last_good)
                save_checkpoint(model, out_dir / "last_good.ckpt", vocab, {"step": last_good_step})
            raise TrainingDiverged(f"step {step}: {exc}") from exc
        records.append({"step": step, "lr": tc.lr_at(step), **losses._asdict()})
        if step % 100 == 99:
            last_good, last_good_step = copy.deepcopy(model.state_dict()), step + 1
        if progress_every and step % progress_every == 0:
            log.info("base step %d %s (%.0fs)", step, losses, time.perf_counter() - t0)

    report = run_eval(model, split.test, vocab, "base_only")
    path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "base.ckpt"
        save_checkpoint(model, path, vocab, {"step": tc.steps, "seed": tc.seed, "config_digest": config.digest()})
        with open(out_dir / "train_log.jsonl", "w") as fh:
            for r in records:
                fh.write(json.dumps(r) + "\n")
        report.save(out_dir / "report.json")
    return BaseRunResult(model, vocab, records, report, initial, path)


# ---------------------------------------------------------------------------
# fine-tuning stage

@dataclass
class FinetuneResult:
    model: Detector
    report: EvalReport
    losses: list[float]
    freeze_violations: list[str]
    reads: dict[str, int]
    support_size: int
    out_dir: Path | None = None

    @property
    def leakage(self) -> int:
        return self.reads.get("base_train", 0)


def freeze_audit(before: Mapping[str, torch.Tensor], model: Detector) -> list[str]:
    """Names of frozen tensors that differ bitwise from ``before``."""
    trainable = trainable_names(model)
    after = model.state_dict()
    return sorted(n for n, t in before.items()
                  if n not in trainable and not torch.equal(t, after[n]))


def run_finetune(config: ExperimentConfig, base: Checkpoint, k: int, seed: int, data: AuditedSplit,
                 policy: str | None = None, out_dir=None, eval_images: str = "test") -> FinetuneResult:
    """Surgery, freeze, K-shot sampling, fine-tuning and joint evaluation for one (K, seed).

    Only ``data.novel_pool`` (training) and ``data.test`` (evaluation) are read.
    """
    if base.stage != "base":
        raise ValueError("run_finetune needs a base-stage checkpoint")
    vocab = data.vocabulary
    tc = TrainConfig(**{**config.finetune.to_dict(), "seed": seed})
    support = sample_support_set(data.novel_pool, k, seed, vocab)

    model = apply_freeze_policy(branch_surgery(base.model, vocab, seed), policy or config.policy)
    model.train()
    post_surgery = {n: t.clone() for n, t in model.state_dict().items()}
    optimizer = make_optimizer(model, tc)
    generator = torch.Generator().manual_seed(seed)
    batches = iterate_batches(support.items, tc.batch_size, seed)
    losses = [finetune_step(model, optimizer, next(batches), tc, step, generator) for step in range(tc.steps)]
    violations = freeze_audit(post_surgery, model)

    mode = config.eval_mode
    images = getattr(data, eval_images)
    report = run_eval(model, images, vocab, mode)
    report.seeds = [seed]
    result = FinetuneResult(model, report, losses, violations, dict(data.reads), len(support.items))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, out_dir / "finetuned.ckpt", vocab,
                        {"k": k, "seed": seed, "policy": model.freeze_policy, "config_digest": config.digest()})
        report.save(out_dir / "report.json")
        (out_dir / "loss.json").write_text(json.dumps(losses))
        (out_dir / "audit.json").write_text(json.dumps(
            {"freeze_violations": violations, "reads": dict(data.reads),
             "base_train_reads": result.leakage}, indent=1, sort_keys=True))
        (out_dir / "manifest.json").write_text(json.dumps(
            {"config_digest": config.digest(), "k": k, "seed": seed, "policy": model.freeze_policy,
             "base_checkpoint": str(base.path) if base.path else None,
             "artifacts": ["finetuned.ckpt", "report.json", "loss.json", "audit.json"]}, indent=1, sort_keys=True))
        result.out_dir = out_dir
    return result


def cell_dir(root, k: int, seed: int, policy: str) -> Path:
    return Path(root) / f"k{k}_seed{seed}_{policy}"


def run_kshot_sweep(config: ExperimentConfig, base: Checkpoint, data: AuditedSplit, out_root=None,
                    policy: str | None = None) -> dict[int, EvalReport]:
    """Fine-tune for every (K, seed) of the config and average over seeds per K."""
    policy = policy or config.policy
    out = {}
    for k in config.k_values:
        reports = []
        for seed in config.seeds:
            d = cell_dir(out_root, k, seed, policy) if out_root is not None else None
            reports.append(run_finetune(config, base, k, seed, data, policy, d).report)
        out[k] = multi_seed_mean(reports, config.seeds)
        if out_root is not None:
            out[k].save(Path(out_root) / f"k{k}_{policy}_mean.json")
    return out


# ---------------------------------------------------------------------------
# ablation grid

# (fine-tuned layers, regressor, classifier) in the order of the published ablation table
ABLATION_ROWS = (
    ("none", "agnostic", "linear"),
    ("fc2", "agnostic", "linear"),
    ("fc1_fc2", "agnostic", "linear"),
    ("none", "agnostic", "cosine"),
    ("fc2", "agnostic", "cosine"),
    ("fc1_fc2", "agnostic", "cosine"),
    ("fc2", "specific", "linear"),
    ("fc2", "specific", "cosine"),
)


@dataclass
class AblationTable:
    rows: list[dict]
    k_values: tuple[int, ...]
    seeds: tuple[int, ...]
    directional: dict | None = None

    def cell(self, layers: str, regressor: str, classifier: str, k: int) -> float:
        for r in self.rows:
            if (r["layers"], r["regressor"], r["classifier"]) == (layers, regressor, classifier):
                return r["nAP"][str(k)]
        raise KeyError((layers, regressor, classifier))

    def to_dict(self) -> dict:
        return {"rows": self.rows, "k_values": list(self.k_values), "seeds": list(self.seeds),
                "directional": self.directional}

    def to_markdown(self) -> str:
        head = "| layers | regressor | classifier | " + " | ".join(f"{k}-shot" for k in self.k_values) + " |"
        sep = "|---|---|---|" + "---|" * len(self.k_values)
        lines = [head, sep]
        for r in self.rows:
            cells = " | ".join(f"{100 * r['nAP'][str(k)]:.1f}" for k in self.k_values)
            lines.append(f"| {r['layers']} | {r['regressor']} | {r['classifier']} | {cells} |")
        return "\n".join(lines)


def directional_check(fc2: Sequence[float], none: Sequence[float]) -> dict:
    """fc2 >= none on mean nAP: ``pass``; behind by at most one standard error of the
    paired per-seed difference: ``flag``; otherwise ``fail``."""
    diff = np.asarray(fc2, dtype=np.float64) - np.asarray(none, dtype=np.float64)
    mean_diff = float(diff.mean())
    se = standard_error(diff)
    status = "pass" if mean_diff >= 0 else ("flag" if mean_diff >= -se else "fail")
    return {"status": status, "mean_fc2": float(np.mean(fc2)), "mean_none": float(np.mean(none)),
            "mean_difference": mean_diff, "standard_error": se}


def run_ablation(config: ExperimentConfig, bases: Mapping[tuple[str, str], Checkpoint], data: AuditedSplit,
                 rows: Sequence[tuple[str, str, str]] = ABLATION_ROWS, out_root=None) -> AblationTable:
    """Mean nAP per (fine-tuned layers, regressor, classifier) row and K column.

    ``bases`` maps (regressor, classifier) to a base checkpoint trained in that mode.
    """
    for layers, regressor, classifier in rows:
        if (regressor, classifier) not in bases:
            raise DependencyError(f"no base checkpoint for regressor={regressor}, classifier={classifier}")
        cfg = bases[(regressor, classifier)].model.cfg
        if (cfg.regressor, cfg.classifier) != (regressor, classifier):
            raise DependencyError(f"checkpoint given for ({regressor}, {classifier}) was trained as "
                                  f"({cfg.regressor}, {cfg.classifier})")
    table_rows = []
    per_seed_cache: dict[tuple, list[float]] = {}
    for layers, regressor, classifier in rows:
        row = {"layers": layers, "regressor": regressor, "classifier": classifier, "nAP": {}, "se": {},
               "per_seed": {}}
        for k in config.k_values:
            vals = []
            for seed in config.seeds:
                d = None
                if out_root is not None:
                    d = Path(out_root) / f"{regressor}_{classifier}" / cell_dir("", k, seed, layers)
                res = run_finetune(config, bases[(regressor, classifier)], k, seed, data, layers, d)
                vals.append(res.report.nAP or 0.0)
            row["nAP"][str(k)] = float(np.mean(vals))
            row["se"][str(k)] = standard_error(vals)
            row["per_seed"][str(k)] = vals
            per_seed_cache[(layers, regressor, classifier, k)] = vals
        table_rows.append(row)
    table = AblationTable(table_rows, config.k_values, config.seeds)
    kmax = max(config.k_values)
    a, b = ("fc2", "agnostic", "linear", kmax), ("none", "agnostic", "linear", kmax)
    if a in per_seed_cache and b in per_seed_cache:
        table.directional = {"k": kmax, **directional_check(per_seed_cache[a], per_seed_cache[b])}
    if out_root is not None:
        Path(out_root).mkdir(parents=True, exist_ok=True)
        (Path(out_root) / "ablation.json").write_text(json.dumps(table.to_dict(), indent=1, sort_keys=True))
        (Path(out_root) / "ablation.md").write_text(table.to_markdown() + "\n")
    return table


# ---------------------------------------------------------------------------
# audits over written run directories

def audit_run(run_dir) -> list[dict]:
    """Re-check every fine-tune cell under ``run_dir``.

    Leakage comes from the recorded access counts. Freeze bit-identity is
    re-derived from the checkpoints: each frozen tensor of the fine-tuned model
    must equal its post-surgery value, i.e. the base checkpoint's tensor (the
    novel RoI layers start as copies of the base ones).
    """
    violations = []
    for audit_file in sorted(Path(run_dir).rglob("audit.json")):
        cell = audit_file.parent
        rec = json.loads(audit_file.read_text())
        if rec.get("base_train_reads", 0):
            violations.append({"cell": str(cell), "kind": "leakage", "base_train_reads": rec["base_train_reads"]})
        for name in rec.get("freeze_violations", []):
            violations.append({"cell": str(cell), "kind": "freeze", "tensor": name})
        manifest = json.loads((cell / "manifest.json").read_text())
        base_path = manifest.get("base_checkpoint")
        if base_path and Path(base_path).exists() and (cell / "finetuned.ckpt").exists():
            base = load_checkpoint(base_path).model.state_dict()
            tuned = load_checkpoint(cell / "finetuned.ckpt").model
            trainable = trainable_names(tuned)
            for name, t in tuned.state_dict().items():
                if name in trainable or name.startswith("cls.novel"):
                    continue
                ref = base.get(name.replace("roi.novel.", "roi.base."))
                if ref is None or not torch.equal(ref, t):
                    violations.append({"cell": str(cell), "kind": "freeze", "tensor": name})
    return violations
