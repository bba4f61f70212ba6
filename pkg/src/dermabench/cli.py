"""Command line entry point: ``dermabench <subcommand>``."""
from __future__ import annotations

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path

from .data import DESCRIPTORS, download_dataset, get_descriptor
from .errors import DermabenchError
from .experiment import ExperimentSpec, load_record, reevaluate_record, run_experiment, write_artifacts
from .models import named_configs
from .reporting import TABLE_MODE, emit_comparison, emit_results_table

log = logging.getLogger("dermabench")

REEVALUATE_TOLERANCE = 1e-5


def _run_dirs(paths: list[str]) -> list[Path]:
    """Accept run directories or a parent directory holding several runs."""
    out = []
    for p in map(Path, paths):
        if (p / "run.json").is_file():
            out.append(p)
        elif p.is_dir():
            out.extend(sorted(d for d in p.iterdir() if (d / "run.json").is_file()))
        else:
            raise DermabenchError(f"{p} is not a run directory")
    if not out:
        raise DermabenchError("no run records found")
    return out


def _completed(paths: list[str]):
    records = [load_record(d) for d in _run_dirs(paths)]
    done = [r for r in records if r.status == "completed"]
    for r in records:
        if r.status != "completed":
            log.warning("skipping %s (%s)", r.run_id, r.status)
    if not done:
        raise DermabenchError("no completed runs among the given records")
    return done


def cmd_download(args) -> int:
    names = [args.dataset] if args.dataset else list(DESCRIPTORS)
    for name in names:
        path = download_dataset(get_descriptor(name), args.out, args.base_url, args.md5)
        print(path)
    return 0


def _spec_from_args(args) -> ExperimentSpec:
    if args.config:
        spec = ExperimentSpec.from_json(args.config)
    else:
        if not (args.dataset and args.model):
            raise DermabenchError("train needs --config or both --dataset and --model")
        spec = ExperimentSpec(dataset=get_descriptor(args.dataset), model=args.model)
    if args.dataset and args.config:
        spec.dataset = get_descriptor(args.dataset)
    if args.model and args.config:
        spec.model = args.model
    overrides = {
        "seed": args.seed,
        "max_epochs": args.epochs,
        "batch_size": args.batch_size,
        "patience": args.patience,
        "learning_rate": args.lr,
    }
    spec.train.update({k: v for k, v in overrides.items() if v is not None})
    for attr, value in (
        ("subsample_fraction", args.subsample),
        ("output_dir", args.out),
        ("data_path", args.data),
        ("weights", args.weights),
        ("input_side", args.input_side),
        ("metrics_mode", args.metrics_mode),
    ):
        if value is not None:
            setattr(spec, attr, value)
    return spec


def cmd_train(args) -> int:
    record = run_experiment(_spec_from_args(args))
    print(f"run {record.run_id} -> {record.run_dir}")
    print(emit_results_table([record]), end="")
    return 0


def cmd_evaluate(args) -> int:
    status = 0
    for run_dir in _run_dirs(args.runs):
        stored, recomputed = reevaluate_record(run_dir, args.split)
        ok = abs(stored - recomputed) <= REEVALUATE_TOLERANCE
        print(f"{run_dir.name}  {args.split} loss stored {stored:.6f}  recomputed {recomputed:.6f}  {'ok' if ok else 'MISMATCH'}")
        status |= 0 if ok else 1
    return status


def cmd_report(args) -> int:
    records = _completed(args.runs)
    by_dataset = defaultdict(list)
    for r in records:
        by_dataset[r.spec.dataset.name].append(r)
    formats = ("text", "csv") if args.format == "both" else (args.format,)
    out = Path(args.out) if args.out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
    for name, group in by_dataset.items():
        for fmt in formats:
            doc = emit_results_table(group, fmt, args.mode)
            if out:
                (out / f"results_{name}.{'txt' if fmt == 'text' else 'csv'}").write_text(doc, encoding="utf-8")
            else:
                print(doc)
        if out:
            for r in group:
                write_artifacts(r, out / r.run_id)
    return 0


def cmd_compare(args) -> int:
    records = _completed(args.runs)
    doc = emit_comparison(records, args.format)
    if args.out:
        Path(args.out).write_text(doc, encoding="utf-8")
    else:
        print(doc, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dermabench", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("download-data", help="fetch dataset archives into the data cache")
    p.add_argument("--dataset", choices=sorted(DESCRIPTORS))
    p.add_argument("--out", help="cache directory (default $DERMABENCH_DATA_DIR or ./data)")
    p.add_argument("--base-url", help="HTTPS base URL holding the archives")
    p.add_argument("--md5", help="expected archive md5")
    p.set_defaults(func=cmd_download)

    p = sub.add_parser("train", help="run one experiment end to end")
    p.add_argument("--config", help="experiment JSON file")
    p.add_argument("--dataset", choices=sorted(DESCRIPTORS))
    p.add_argument("--model", choices=[c.name for c in named_configs()])
    p.add_argument("--subsample", type=float, help="stratified fraction of every split")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="directory receiving runs/<run-id>")
    p.add_argument("--data", help="archive file or directory (default $DERMABENCH_DATA_DIR)")
    p.add_argument("--weights", help="'imagenet', 'random' or a local state-dict path")
    p.add_argument("--input-side", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--metrics-mode", choices=["threshold_micro", "argmax_macro", "both"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="re-evaluate persisted runs from their checkpoints")
    p.add_argument("runs", nargs="+")
    p.add_argument("--split", default="test", choices=["test", "validation"])
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="results tables and figures from run records")
    p.add_argument("runs", nargs="+")
    p.add_argument("--format", default="both", choices=["text", "csv", "both"])
    p.add_argument("--mode", default=TABLE_MODE, choices=["threshold_micro", "argmax_macro"])
    p.add_argument("--out", help="write documents and figures here instead of stdout")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("compare", help="accuracy against published baselines")
    p.add_argument("runs", nargs="+")
    p.add_argument("--format", default="text", choices=["text", "csv"])
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DermabenchError, OSError) as exc:
        print(f"dermabench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
