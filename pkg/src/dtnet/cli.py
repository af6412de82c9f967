"""Command line: synth, train, eval, ablate, export-predictions.

Exit codes: 0 success, 2 usage errors (bad flags, missing inputs, invalid
config), 1 runtime failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ck
from .config import (
    TOY_CLASSIFICATION_STAGES,
    TOY_SEGMENTATION_STAGES,
    ConfigError,
    build_run_config,
    load_config,
    normalize_task,
    parse_config_text,
    render_config,
)
from .data import DatasetManifest, ManifestError, PointCloud, synth_classification, synth_segmentation, write_xyz
from .geometry import CountError
from .model import ATTENTION_VARIANTS, DTNet, SpecError
from .train import TrainConfig, TrainingError, evaluate, predict, train

logger = logging.getLogger("dtnet")

CHECKPOINT_NAME = "checkpoint.ckpt"
LOG_NAME = "metrics.jsonl"


class UsageError(Exception):
    pass


def _task(value: str) -> str:
    try:
        return normalize_task(value)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return p


def _load_manifest(path: str) -> DatasetManifest:
    return DatasetManifest.load(_existing(path))


def _metrics_record(metrics, split: str, extra=None) -> dict:
    rec = {"schema": 1, "split": split, **metrics.as_dict()}
    if extra:
        rec.update(extra)
    return rec


def toy_config_text(task: str, n_classes: int) -> str:
    if task == "classification":
        stages = TOY_CLASSIFICATION_STAGES.rsplit("-FC(", 1)[0] + f"-FC(C={n_classes})"
        values = {"stages": stages, "lr": "0.003", "epochs": "30", "dropout_max_ratio": "0.3", "head_dropout": "0.2"}
    else:
        stages = TOY_SEGMENTATION_STAGES.rsplit("-FC(", 1)[0] + f"-FC(C={n_classes})"
        values = {"stages": stages, "lr": "0.003", "epochs": "20", "lr_decay": "0.5", "dropout_max_ratio": "0.3", "head_dropout": "0.0"}
    values.update(task=task, n_classes=str(n_classes))
    spec, tc = build_run_config(parse_config_text("\n".join(f"{k} = {v}" for k, v in values.items())))
    return render_config(spec, tc)


def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.task == "classification":
        m = synth_classification(out, args.n_points or 256, args.n_per_class, args.n_test_per_class, args.seed)
    else:
        m = synth_segmentation(out, args.n_points or 512, args.n_instances, args.n_test, args.seed)
    (out / "toy.cfg").write_text(toy_config_text(m.task, len(m.labels)), encoding="utf-8")
    print(json.dumps({"manifest": str(out / "manifest.json"), "config": str(out / "toy.cfg"), **{k: len(v) for k, v in m.splits.items()}}))
    return 0


def _run_config(args, manifest: DatasetManifest):
    values = load_config(_existing(args.config)) if args.config else {}
    task = args.task or manifest.task
    if normalize_task(task) != manifest.task:
        raise UsageError(f"--task {task} does not match the {manifest.task} dataset")
    return build_run_config(values, task, len(manifest.labels))


def cmd_train(args) -> int:
    manifest = _load_manifest(args.data)
    spec, tc = _run_config(args, manifest)
    train_set = manifest.dataset("train")
    test_set = manifest.dataset("test") if "test" in manifest.splits and args.eval_test else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = DTNet(spec, tc.seed)
    state, start = None, 0
    if args.resume:
        ckpt = ck.load_checkpoint(_existing(args.resume), model)
        state, start = ckpt.adam_state(), ckpt.epoch
    elif (out / LOG_NAME).exists():
        (out / LOG_NAME).unlink()
    result = train(
        model, train_set, tc, state=state, start_epoch=start, log_path=out / LOG_NAME, eval_train=args.eval_train, eval_data=test_set
    )
    ck.save_checkpoint(out / CHECKPOINT_NAME, ck.Checkpoint.from_model(model, result.state, result.epoch, tc.seed, tc))
    final = result.history[-1] if result.history else {"epoch": start}
    print(json.dumps(final, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    manifest = _load_manifest(args.data)
    ckpt = ck.load_checkpoint(_existing(args.checkpoint))
    if ckpt.spec.task != manifest.task:
        raise UsageError(f"checkpoint is for {ckpt.spec.task}, data is {manifest.task}")
    model = ckpt.build_model()
    metrics = evaluate(model, manifest.dataset(args.split))
    rec = _metrics_record(metrics, args.split, {"epoch": ckpt.epoch})
    line = json.dumps(rec, sort_keys=True)
    print(line)
    if args.log:
        with open(args.log, "a", encoding="utf-8") as fh:
            fh.write(line + "\n")
    return 0


def cmd_ablate(args) -> int:
    manifest = _load_manifest(args.data)
    spec, tc = _run_config(args, manifest)
    train_set = manifest.dataset("train")
    test_set = manifest.dataset("test") if "test" in manifest.splits else None
    rows = run_ablation(spec, tc, train_set, test_set, log_dir=Path(args.out) if args.out else None)
    print(format_ablation_table(rows))
    if args.out:
        (Path(args.out) / "ablation.json").write_text(json.dumps(rows, indent=1, sort_keys=True), encoding="utf-8")
    return 0


ABLATION_LABELS = {"none": "Baseline", "pwsa": "Baseline + PWSA", "cwsa": "Baseline + CWSA", "both": "Full (PWSA + CWSA)"}


def run_ablation(spec, tc: TrainConfig, train_set, test_set=None, log_dir: Path | None = None) -> list[dict]:
    """Train the four attention variants with identical seeds and data."""
    rows = []
    for variant in ATTENTION_VARIANTS:
        vspec = spec.with_attention(variant)
        model = DTNet(vspec, tc.seed)
        log_path = None
        if log_dir is not None:
            log_dir.mkdir(parents=True, exist_ok=True)
            log_path = log_dir / f"ablation_{variant}.jsonl"
            log_path.unlink(missing_ok=True)
        result = train(model, train_set, tc, log_path=log_path)
        tr = evaluate(model, train_set)
        row = {
            "variant": variant,
            "label": ABLATION_LABELS[variant],
            "parameters": model.num_parameters(),
            "final_loss": result.history[-1]["loss"] if result.history else None,
            "train_oa": tr.overall_accuracy,
            "train_class_acc": tr.class_average_accuracy,
        }
        if tr.mean_iou is not None:
            row["train_miou"] = tr.mean_iou
        if test_set is not None:
            te = evaluate(model, test_set)
            row.update(test_oa=te.overall_accuracy, test_class_acc=te.class_average_accuracy)
            if te.mean_iou is not None:
                row["test_miou"] = te.mean_iou
        rows.append(row)
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    cols = [("label", "Method", "{}"), ("parameters", "Params", "{}"), ("train_class_acc", "Train ACC", "{:.4f}"),
            ("train_oa", "Train OA", "{:.4f}"), ("test_class_acc", "Test ACC", "{:.4f}"), ("test_oa", "Test OA", "{:.4f}")]
    cols = [c for c in cols if any(c[0] in r for r in rows)]
    cells = [[h for _, h, _ in cols]] + [[f.format(r[k]) if k in r else "-" for k, _, f in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def cmd_export(args) -> int:
    manifest = _load_manifest(args.data)
    ckpt = ck.load_checkpoint(_existing(args.checkpoint))
    model = ckpt.build_model()
    ds = manifest.dataset(args.split)
    pred = predict(model, ds.coords)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, entry in enumerate(manifest.splits[args.split]):
        # classification predictions are broadcast to every point
        labels = pred[i] if pred.ndim == 2 else np.full(ds.coords.shape[1], pred[i])
        write_xyz(out / Path(entry["file"]).name, PointCloud(ds.coords[i]), labels)
    print(json.dumps({"written": len(ds), "out": str(out)}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset")
    s.add_argument("--task", type=_task, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--n-points", type=int, default=None)
    s.add_argument("--n-per-class", type=int, default=100)
    s.add_argument("--n-test-per-class", type=int, default=20)
    s.add_argument("--n-instances", type=int, default=200)
    s.add_argument("--n-test", type=int, default=40)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--task", type=_task, default=None)
    t.add_argument("--config", default=None)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="continue from a checkpoint")
    t.add_argument("--eval-train", action="store_true", help="log eval-mode train metrics every epoch")
    t.add_argument("--eval-test", action="store_true", help="log test metrics every epoch")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--log", default=None, help="append the metrics record here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train baseline / +PWSA / +CWSA / full and compare")
    a.add_argument("--task", type=_task, default=None)
    a.add_argument("--config", default=None)
    a.add_argument("--data", required=True)
    a.add_argument("--out", default=None)
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-predictions", help="write predicted labels as xyz files")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, FileNotFoundError) as exc:
        print(f"dtnet {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ck.CheckpointError, TrainingError, SpecError, CountError, ValueError, OSError) as exc:
        print(f"dtnet {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
