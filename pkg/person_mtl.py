#!/usr/bin/env python3
"""
Person Multi-Task CLI
Synthesize, convert, train, evaluate, pseudo-label, visualize, plot and benchmark
"""

import argparse
import logging
import shutil
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from mtl_config import (TASKS, ConfigurationError, PersonMTLError, load_train_config, parse_size, resolve_run_root,
                        save_json, setup_logging)

logger = logging.getLogger(__name__)


def _tasks(text: Optional[str]) -> Optional[List[str]]:
    if not text:
        return None
    tasks = [t.strip() for t in text.split(",") if t.strip()]
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ConfigurationError("tasks", f"unknown tasks {unknown} (expected some of {list(TASKS)})")
    return tasks


def _record_command(args: argparse.Namespace, path: Path, **resolved: Any) -> Path:
    """Write the fully resolved command next to its outputs"""
    data: Dict[str, Any] = {"command": args.command}
    for key, value in vars(args).items():
        if key in ("handler", "command"):
            continue
        data[key] = [str(v) for v in value] if isinstance(value, list) else (str(value) if isinstance(value, Path) else value)
    data.update(resolved)
    return save_json(data, path)


def _timestamped(prefix: str) -> Path:
    return resolve_run_root() / f"{prefix}_{datetime.now().strftime('%Y%m%d_%H%M%S')}"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from synthetic_people import generate_synthetic

    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise ConfigurationError("out", f"{out} exists and is not empty (use --force to replace it)")
        shutil.rmtree(out)
    height, width = parse_size(args.size)
    manifest_path = generate_synthetic(out, args.identities, args.images_per_id, (height, width), args.seed,
                                       args.holdout_identities)
    _record_command(args, out / "resolved_config.json", size=[height, width])
    print(manifest_path)
    return 0


def cmd_convert(args) -> int:
    from person_datasets import convert_lip, convert_market, convert_mpii

    out = Path(args.out)
    if args.layout == "market":
        path = convert_market(args.root, out, args.attributes)
    elif args.layout == "mpii":
        path = convert_mpii(args.root, out)
    else:
        path = convert_lip(args.root, out, args.merge_parts)
    _record_command(args, out.with_name(f"{out.stem}_resolved_config.json"))
    print(path)
    return 0


def cmd_train(args) -> int:
    from trainer import train

    config = load_train_config(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.init:
        config.init_checkpoint = str(Path(args.init).resolve())
        config.init_scopes = args.scopes or ["all"]
    if args.run_dir:
        run_dir = Path(args.run_dir)
    elif args.resume:
        run_dir = Path(args.resume).resolve().parent.parent
    else:
        run_dir = _timestamped(Path(args.config).stem)
    result = train(config, run_dir, args.limit_identities, args.resume, args.device)
    _record_command(args, run_dir / "command.json", run_dir=str(run_dir))
    if result.report is not None:
        logger.info(f"Final metrics: {result.report.flat_row()}")
    print(run_dir)
    return 0


def cmd_evaluate(args) -> int:
    from trainer import evaluate

    out = Path(args.out) if args.out else _timestamped("eval")
    report = evaluate(args.checkpoint, args.manifest, _tasks(args.tasks), args.split, args.batch_size, args.device)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "metrics.json")
    report.to_csv(out / "metrics.csv")
    _record_command(args, out / "resolved_config.json", sections=report.sections())
    print(out / "metrics.json")
    return 0


def cmd_pseudo_label(args) -> int:
    from pseudo_labeling import pseudo_label

    if not args.pose_checkpoint and not args.seg_checkpoint:
        raise ConfigurationError("checkpoint", "give --pose-checkpoint and/or --seg-checkpoint")
    out = Path(args.out)
    path = pseudo_label(args.manifest, out, args.pose_checkpoint, args.seg_checkpoint, args.device)
    _record_command(args, out / "resolved_config.json")
    print(path)
    return 0


def cmd_visualize(args) -> int:
    from visualization import visualize

    out = Path(args.out)
    written = visualize(args.checkpoint, args.images, out, _tasks(args.tasks), args.scale)
    _record_command(args, out / "resolved_config.json", overlays=[str(p) for p in written])
    for path in written:
        print(path)
    return 0


def cmd_plot_curve(args) -> int:
    from visualization import plot_learning_curves

    outputs = plot_learning_curves(args.runs, args.metric, args.out, args.x_key)
    _record_command(args, outputs["svg"].with_name(f"{outputs['svg'].stem}_resolved_config.json"))
    print(outputs["svg"])
    print(outputs["csv"])
    return 0


def cmd_benchmark(args) -> int:
    from trainer import benchmark_throughput

    sizes = [int(s) for s in args.batch_sizes.split(",") if s.strip()]
    if not sizes or any(s <= 0 for s in sizes):
        raise ConfigurationError("batch_sizes", f"expected positive integers, got {args.batch_sizes!r}")
    results = benchmark_throughput(args.checkpoint, sizes, args.repeats, device=args.device)
    out = Path(args.out) if args.out else _timestamped("benchmark")
    save_json({"crops_per_second": {str(k): v for k, v in results.items()}}, out / "throughput.json")
    _record_command(args, out / "resolved_config.json")
    for batch_size, rate in results.items():
        print(f"batch {batch_size}: {rate:.1f} crops/s")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="person_mtl", description="Joint person re-identification, attribute, "
                                                                    "pose and part segmentation training")
    parser.add_argument("--log-level", default=None, help="Logging level (default: $PERSON_MTL_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    synth = commands.add_parser("synth", help="Render a synthetic stick-figure dataset")
    synth.add_argument("--out", required=True, help="Output directory")
    synth.add_argument("--identities", type=int, default=32, help="Training identities")
    synth.add_argument("--images-per-id", type=int, default=8, help="Images per identity")
    synth.add_argument("--holdout-identities", type=int, default=0,
                       help="Extra identities emitted as query/gallery splits")
    synth.add_argument("--size", default="128x64", help="Image size HEIGHTxWIDTH")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--force", action="store_true", help="Replace a non-empty output directory")
    synth.set_defaults(handler=cmd_synth)

    convert = commands.add_parser("convert", help="Convert a Market/MPII/LIP directory layout into a manifest")
    convert.add_argument("--layout", required=True, choices=["market", "mpii", "lip"])
    convert.add_argument("--root", required=True, help="Dataset root directory")
    convert.add_argument("--out", required=True, help="Manifest path to write")
    convert.add_argument("--attributes", default=None, help="Market attribute CSV (person_id + attribute columns)")
    convert.add_argument("--merge-parts", action="store_true", help="Merge LIP classes into the five body parts")
    convert.set_defaults(handler=cmd_convert)

    train = commands.add_parser("train", help="Train a model from a JSON config")
    train.add_argument("--config", required=True)
    train.add_argument("--limit-identities", type=int, default=None,
                       help="Keep only N training identities of every ReID dataset")
    train.add_argument("--init", default=None, help="Checkpoint to initialize from")
    train.add_argument("--scopes", nargs="+", default=None,
                       help="Scopes to initialize: all, backbone, heads.<name> or a task name")
    train.add_argument("--resume", default=None, help="Checkpoint of an interrupted run to continue")
    train.add_argument("--run-dir", default=None, help="Run directory (default: under $PERSON_MTL_RUN_ROOT)")
    train.add_argument("--seed", type=int, default=None, help="Override the config seed")
    train.add_argument("--device", default="cpu")
    train.set_defaults(handler=cmd_train)

    evaluate = commands.add_parser("evaluate", help="Evaluate a checkpoint on a manifest")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--manifest", required=True)
    evaluate.add_argument("--tasks", default=None, help="Comma-separated subset of " + ",".join(TASKS))
    evaluate.add_argument("--split", default=None, choices=["train", "val", "test"])
    evaluate.add_argument("--out", default=None, help="Report directory")
    evaluate.add_argument("--batch-size", type=int, default=32)
    evaluate.add_argument("--device", default="cpu")
    evaluate.set_defaults(handler=cmd_evaluate)

    pseudo = commands.add_parser("pseudo-label", help="Annotate a manifest with model predictions")
    pseudo.add_argument("--manifest", required=True)
    pseudo.add_argument("--out", required=True, help="Output directory for masks and the new manifest")
    pseudo.add_argument("--pose-checkpoint", default=None)
    pseudo.add_argument("--seg-checkpoint", default=None)
    pseudo.add_argument("--device", default="cpu")
    pseudo.set_defaults(handler=cmd_pseudo_label)

    visualize = commands.add_parser("visualize", help="Draw prediction overlays")
    visualize.add_argument("--checkpoint", required=True)
    visualize.add_argument("--images", required=True, nargs="+", help="Image files or directories")
    visualize.add_argument("--out", required=True)
    visualize.add_argument("--tasks", default=None, help="Overlay tasks (default: every available head)")
    visualize.add_argument("--scale", type=int, default=2)
    visualize.set_defaults(handler=cmd_visualize)

    plot = commands.add_parser("plot-curve", help="Plot a metric across runs")
    plot.add_argument("--runs", required=True, nargs="+", help="Run directories containing metrics.json")
    plot.add_argument("--metric", required=True, help="Flat metric name, e.g. reid.cmc@1")
    plot.add_argument("--out", required=True, help="Output path; .svg and .csv are written")
    plot.add_argument("--x-key", default="train_identities", help="Report meta field on the x axis")
    plot.set_defaults(handler=cmd_plot_curve)

    bench = commands.add_parser("benchmark", help="Measure inference throughput")
    bench.add_argument("--checkpoint", required=True)
    bench.add_argument("--batch-sizes", default="1,10")
    bench.add_argument("--repeats", type=int, default=20)
    bench.add_argument("--out", default=None)
    bench.add_argument("--device", default="cpu")
    bench.set_defaults(handler=cmd_benchmark)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except PersonMTLError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
