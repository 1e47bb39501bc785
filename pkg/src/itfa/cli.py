"""Command-line entry point: ``itfa <command> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from itfa.checkpoint import load_checkpoint, save_checkpoint
from itfa.evalmetrics import EvalReport
from itfa.experiment import (
    ABLATION_ROWS,
    AuditedSplit,
    ExperimentConfig,
    audit_run,
    run_ablation,
    run_base_training,
    run_eval,
    run_kshot_sweep,
)
from itfa.inference import detect, write_detections, detect_all
from itfa.reporting import emit_plots, render_detections
from itfa.synthdata import DatasetConfig, build_dataset, load_dataset, save_dataset
from itfa.training import branch_surgery

log = logging.getLogger("itfa")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    d = cfg.to_dict()
    if getattr(args, "dataset", None):
        d["dataset_dir"] = args.dataset
    for flag, key in (("k", "k_values"), ("seeds", "seeds")):
        if getattr(args, flag, None):
            d[key] = list(_ints(getattr(args, flag)))
    if getattr(args, "policy", None):
        d["policy"] = args.policy
    if getattr(args, "classifier", None):
        d["detector"]["classifier"] = args.classifier
    if getattr(args, "regressor", None):
        d["detector"]["regressor"] = args.regressor
    if getattr(args, "eval_mode", None):
        d["eval_mode"] = args.eval_mode
    return ExperimentConfig.from_dict(d)


def _split(args, cfg: ExperimentConfig):
    if cfg.dataset_dir:
        return load_dataset(cfg.dataset_dir)
    return build_dataset(cfg.dataset)


def _out(args, cfg: ExperimentConfig, default: str) -> Path:
    return Path(args.out) if getattr(args, "out", None) else cfg.output_root / default


# ---------------------------------------------------------------------------

def cmd_dataset_build(args) -> int:
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    dcfg = DatasetConfig.from_dict(raw.get("dataset", raw))
    split = build_dataset(dcfg)
    save_dataset(split, args.out, dcfg)
    print(f"dataset written to {args.out}: {len(split.base_train)} base-train, "
          f"{len(split.novel_pool)} novel-pool, {len(split.test)} test images")
    return 0


def cmd_train_base(args) -> int:
    cfg = _config(args)
    out = _out(args, cfg, "base")
    res = run_base_training(cfg, _split(args, cfg), out, progress_every=100)
    print(f"base checkpoint: {res.checkpoint_path}  bAP={res.report.bAP:.3f} bAP50={res.report.bAP50:.3f}")
    return 0


def cmd_surgery(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = branch_surgery(ckpt.model, ckpt.vocab, args.seed)
    save_checkpoint(model, args.out, ckpt.vocab, {**ckpt.metadata, "surgery_seed": args.seed})
    print(f"branched checkpoint: {args.out}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _config(args)
    base = load_checkpoint(args.checkpoint)
    data = AuditedSplit(_split(args, cfg))
    out = _out(args, cfg, "finetune")
    means = run_kshot_sweep(cfg, base, data, out)
    for k, r in means.items():
        print(f"K={k}: nAP={r.nAP:.3f} bAP={r.bAP:.3f} hAP={r.hAP:.3f} "
              f"nAP50={r.nAP50:.3f} bAP50={r.bAP50:.3f} hAP50={r.hAP50:.3f}")
    violations = audit_run(out)
    return _report_violations(violations, out)


def cmd_eval(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    split = _split(args, cfg)
    images = getattr(split, args.split)
    report = run_eval(ckpt.model, images, ckpt.vocab, args.mode)
    if args.out:
        report.save(args.out)
    if args.detections:
        write_detections(args.detections, [im.image_id for im in images],
                         detect_all(images, ckpt.model, ckpt.vocab), ckpt.vocab)
    print(json.dumps({k: getattr(report, k) for k in ("bAP", "nAP", "hAP", "bAP50", "nAP50", "hAP50")}))
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    bases = {}
    for spec in args.base:
        key, _, path = spec.partition("=")
        regressor, _, classifier = key.partition(":")
        bases[(regressor, classifier)] = load_checkpoint(path)
    rows = ABLATION_ROWS
    if args.rows:
        wanted = set(args.rows.split(","))
        rows = tuple(r for r in ABLATION_ROWS if "/".join(r) in wanted)
    out = _out(args, cfg, "ablation")
    table = run_ablation(cfg, bases, AuditedSplit(_split(args, cfg)), rows, out)
    print(table.to_markdown())
    if table.directional:
        print(f"directional check (fc2 >= none at K={table.directional['k']}): {table.directional['status']}")
    return _report_violations(audit_run(out), out)


def cmd_render(args) -> int:
    cfg = _config(args)
    ckpt = load_checkpoint(args.checkpoint)
    images = getattr(_split(args, cfg), args.split)
    img = images[args.index]
    dets = detect(img.pixels, ckpt.model, ckpt.vocab, score_threshold=args.threshold)
    render_detections(img.pixels, dets, ckpt.vocab, args.out, scale=args.scale)
    print(f"{len(dets)} detections rendered to {args.out}")
    return 0


def cmd_plot(args) -> int:
    run = Path(args.run)
    logs = {}
    base_log = next(iter(sorted(run.rglob("train_log.jsonl"))), None)
    if base_log:
        logs["base"] = [json.loads(line) for line in base_log.read_text().splitlines() if line]
    reports = {}
    for f in sorted(run.rglob("k*_mean.json")):
        k = int(f.name.split("_")[0][1:])
        reports[k] = EvalReport.load(f)
    ablation_file = next(iter(sorted(run.rglob("ablation.json"))), None)
    ablation = json.loads(ablation_file.read_text()) if ablation_file else None
    written = emit_plots(args.out or run / "plots", logs, reports, ablation)
    for p in written:
        print(p)
    return 0


def _report_violations(violations: list[dict], where: Path) -> int:
    if not violations:
        print("audit: no violations")
        return 0
    where.mkdir(parents=True, exist_ok=True)
    (where / "violations.json").write_text(json.dumps(violations, indent=1))
    print(f"audit: {len(violations)} violation(s), see {where / 'violations.json'}", file=sys.stderr)
    return 2


def cmd_audit(args) -> int:
    return _report_violations(audit_run(args.run), Path(args.out or args.run))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="itfa", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, dataset=True):
        if config:
            sp.add_argument("--config", help="experiment config (JSON)")
        if dataset:
            sp.add_argument("--dataset", help="dataset directory written by 'dataset build'")

    ds = sub.add_parser("dataset").add_subparsers(dest="action", required=True)
    sp = ds.add_parser("build", help="generate and save the synthetic dataset")
    sp.add_argument("--config", help="dataset or experiment config (JSON)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_dataset_build)

    tr = sub.add_parser("train").add_subparsers(dest="action", required=True)
    sp = tr.add_parser("base", help="base-stage training")
    common(sp)
    sp.add_argument("--classifier", choices=("linear", "cosine"))
    sp.add_argument("--regressor", choices=("agnostic", "specific"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_train_base)

    sp = sub.add_parser("surgery", help="split a base checkpoint into base/novel branches")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_surgery)

    sp = sub.add_parser("finetune", help="K-shot fine-tuning over K values and seeds")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="base-stage checkpoint")
    sp.add_argument("--k", help="comma-separated K values")
    sp.add_argument("--seeds", help="comma-separated seeds")
    sp.add_argument("--policy", choices=("none", "fc2", "fc1_fc2"))
    sp.add_argument("--eval-mode", choices=("joint", "novel_only"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_finetune)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=("test", "shifted_test", "novel_pool", "base_train"))
    sp.add_argument("--mode", default="joint", choices=("joint", "novel_only", "base_only"))
    sp.add_argument("--out", help="report JSON path")
    sp.add_argument("--detections", help="write a detection dump (JSON lines)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="fine-tuning layer x regressor x classifier grid")
    common(sp)
    sp.add_argument("--base", action="append", required=True,
                    help="REGRESSOR:CLASSIFIER=PATH, e.g. agnostic:linear=runs/base/base.ckpt")
    sp.add_argument("--rows", help="subset of rows as layers/regressor/classifier, comma-separated")
    sp.add_argument("--k")
    sp.add_argument("--seeds")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("render", help="draw detections on one image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--index", type=int, default=0)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--scale", type=int, default=4)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("plot", help="plots from a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("audit", help="freeze and leakage audit of a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out", help="where to write violations.json")
    sp.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
