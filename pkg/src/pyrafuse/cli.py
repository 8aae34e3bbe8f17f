"""Command line interface.

Subcommands: generate, train, eval, ablate, gradcheck.
Exit codes: 0 success, 1 usage/config error, 2 numeric failure (non-finite
loss, failed gradient check, unsatisfiable generation), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import zipfile
from pathlib import Path

from .errors import (
    ConfigError,
    GenerationError,
    InvalidValueError,
    NumericError,
    UsageError,
)
from .evaluation import evaluate, write_report
from .neck import ABLATION_ROWS
from .scenes import GeneratorConfig, export_dataset, generate_split, load_dataset
from .training import (
    TrainConfig,
    ablation_config,
    evaluate_checkpoint_records,
    load_checkpoint,
    train,
)
from .verification import (
    COMPOSITE_TOLERANCE,
    N_SEEDS,
    OP_TOLERANCE,
    run_gradient_suite,
)

SPLITS = ("train", "easy", "hard", "hidden")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems map to exit code 1
        raise UsageError(message)


def _load_generator_config(path: str | None) -> GeneratorConfig:
    if path is None:
        return GeneratorConfig()
    with open(path) as fh:
        return GeneratorConfig.from_dict(json.load(fh))


def cmd_generate(args) -> int:
    config = _load_generator_config(args.config)
    splits = list(SPLITS) if args.mode == "all" else [args.mode]
    out = Path(args.out)
    for split in splits:
        count = args.count if args.count is not None else config.counts.get(split, 0)
        if count <= 0:
            raise UsageError(f"no count configured for split {split!r}; pass --count")
        records = generate_split(split, count, args.seed, config)
        export_dataset(records, out / split, config)
        n_inst = sum(len(r.instances) for r in records)
        print(f"{split}: wrote {len(records)} images, {n_inst} annotations "
              f"-> {out / split}")
    with open(out / "generator_config.json", "w") as fh:
        json.dump(config.to_dict(), fh, indent=1)
    return 0


def cmd_train(args) -> int:
    config = TrainConfig.from_json(args.config)
    data = args.data or config.data
    if not data:
        raise UsageError("no dataset: pass --data or set 'data' in the config")

    def progress(epoch, loss, split_ap):
        extra = "".join(f" {k}_ap={v:.4f}" for k, v in split_ap.items())
        print(f"epoch {epoch}/{config.schedule.epochs} loss={loss:.6f}{extra}")

    outcome = train(config, data, args.out, progress=progress)
    print(f"checkpoint: {outcome.checkpoint}")
    print(f"metrics: {outcome.metrics_csv}")
    return 0


def _merged_split(data_root: Path, splits: list[str]) -> tuple[list, dict]:
    """Concatenate split datasets with image/annotation ids kept unique."""
    all_records, images, annotations = [], [], []
    categories = None
    for si, split in enumerate(splits):
        records, manifest = load_dataset(data_root / split)
        offset = si * 1_000_000
        for img in manifest["images"]:
            img = dict(img)
            img["id"] += offset
            images.append(img)
        for ann in manifest["annotations"]:
            ann = dict(ann)
            ann["image_id"] += offset
            ann["id"] += offset
            annotations.append(ann)
        categories = manifest["categories"]
        all_records.extend(records)
    return all_records, {"images": images, "annotations": annotations,
                         "categories": categories}


def cmd_eval(args) -> int:
    data_root = Path(args.data)
    splits = ["easy", "hard", "hidden"] if args.split == "overall" else [args.split]
    records, manifest = _merged_split(data_root, splits)
    if args.replay_gt:
        detections = [{
            "image_id": ann["image_id"], "category_id": ann["category_id"],
            "bbox": list(ann["bbox"]), "score": 1.0,
            "segmentation": ann["segmentation"],
        } for ann in manifest["annotations"]]
        results = {task: evaluate(manifest["annotations"], detections,
                                  manifest["images"], manifest["categories"], task=task)
                   for task in ("box", "mask")}
    else:
        if not args.checkpoint:
            raise UsageError("pass --checkpoint or --replay-gt")
        model, meta, _ = load_checkpoint(args.checkpoint)
        config = TrainConfig.from_dict(meta["config"])
        results = evaluate_checkpoint_records(model, records, manifest, config)
    write_report(args.report, results)
    for task, res in results.items():
        stats = res.summary.to_dict()
        line = " ".join(f"{k}={stats[k]:.4f}" for k in ("AP", "AP50", "AP75", "AP_S"))
        print(f"{args.split}/{task}: {line}")
    print(f"report: {args.report}")
    return 0


def cmd_ablate(args) -> int:
    base = TrainConfig.from_json(args.config)
    data = args.data or base.data
    if not data:
        raise UsageError("no dataset: pass --data or set 'data' in the config")
    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    hidden_records, hidden_manifest = _merged_split(Path(data), ["hidden"])
    metric_keys = ("AP", "AP50", "AP75", "AP_S", "AR_1", "AR_10", "AR_100", "AR_S")
    rows = []
    for name, use_sca, use_ssa, use_dr in ABLATION_ROWS:
        cfg = ablation_config(base, use_sca, use_ssa, use_dr)
        run_dir = out_csv.parent / f"ablate_{name}"
        print(f"[{name}] training (sca={use_sca} ssa={use_ssa} dr={use_dr})")
        outcome = train(cfg, data, run_dir)
        model, _, _ = load_checkpoint(outcome.checkpoint)
        hidden = evaluate_checkpoint_records(model, hidden_records, hidden_manifest, cfg,
                                             tasks=("box",))["box"].summary
        stats = hidden.to_dict()
        rows.append([name, int(use_sca), int(use_ssa), int(use_dr)] +
                    [repr(stats[k]) for k in metric_keys])
        print(f"[{name}] hidden AP={stats['AP']:.4f}")
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["name", "use_sca", "use_ssa", "use_dr", *metric_keys])
        writer.writerows(rows)
    print(f"wrote {out_csv}")
    return 0


def cmd_gradcheck(args) -> int:
    op_tol = args.tolerance if args.tolerance is not None else OP_TOLERANCE
    comp_tol = max(op_tol, COMPOSITE_TOLERANCE)
    report = run_gradient_suite(n_seeds=args.seeds, op_tolerance=op_tol,
                                composite_tolerance=comp_tol)
    print(report.format())
    if not report.passed:
        raise NumericError("gradient check failed; see table above")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="pyrafuse", description=__doc__)
    sub = parser.add_subparsers(dest="command")

    g = sub.add_parser("generate", help="write synthetic dataset splits")
    g.add_argument("--mode", choices=SPLITS + ("all",), required=True)
    g.add_argument("--count", type=int, default=None,
                   help="records per split (default: config counts)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--config", default=None, help="generator config JSON")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", required=True, help="train config JSON")
    t.add_argument("--data", default=None, help="dataset root (overrides config)")
    t.add_argument("--out", required=True, help="run directory")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", default=None)
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", choices=("easy", "hard", "hidden", "overall"),
                   default="overall")
    e.add_argument("--report", required=True, help="output report.json path")
    e.add_argument("--replay-gt", action="store_true",
                   help="evaluate ground truth replayed as detections")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train/evaluate all neck toggle combinations")
    a.add_argument("--config", required=True, help="base train config JSON")
    a.add_argument("--data", default=None)
    a.add_argument("--out", required=True, help="output CSV path")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    c.add_argument("--tolerance", type=float, default=None,
                   help=f"op tolerance (default {OP_TOLERANCE:g}; composites use "
                        f"at least {COMPOSITE_TOLERANCE:g})")
    c.add_argument("--seeds", type=int, default=N_SEEDS)
    c.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_help()
            return 1
        return int(args.func(args) or 0)
    except SystemExit as exc:  # argparse -h
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, GenerationError, InvalidValueError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (OSError, zipfile.BadZipFile, json.JSONDecodeError, ValueError) as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
