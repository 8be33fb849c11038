#!/usr/bin/env python3
"""
Command-line entry point for the federated heterogeneity simulator.

Subcommands:
    synth       generate a synthetic task and write train/val/test IDX files
    partition   build a partition manifest from a plan and print its skew
    train       run one protocol on a manifest and write the run result
    experiment  run a full experiment configuration and write its report
    report      re-render CSV and SVG outputs from an existing results.json

Exit codes: 0 on success, 1 on validation errors, 2 on runtime failures.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

from src.datasets import SynthSpec, stratified_split, synth_generate, write_idx
from src.evaluation import evaluate_run
from src.experiment import SPLIT_FILES, load_config, load_idx_dir, run_experiment
from src.federation import Method, ProtocolConfig, run_protocol, validate_shards
from src.network import ARCHITECTURES, arch_from_name
from src.report import emit_report, load_results, render_report
from src.seeding import derive_seed
from src.skew import PartitionPlan, build_partition, load_manifest, save_manifest, score_partition

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

TRAIN_DEFAULTS = {
    "method": None,
    "wp": False,
    "wl": False,
    "bn_avg": False,
    "batch_size": 32,
    "learning_rate": 0.05,
    "epochs": 10,
    "seed": 0,
    "threads": 1,
    "arch": "tiny-conv",
    "hidden": None,
    "uniform_fedavg": False,
    "trace": False,
}


def _read_json(path: str, what: str) -> Dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: syntax error at line {e.lineno} column {e.colno}: {e.msg}")


def _parse_split(text: str):
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise ValueError(f"--split expects three comma-separated fractions, got '{text}'")
    return values


def _parse_batch(text: str):
    if text == "full":
        return text
    try:
        return int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"batch size must be an integer or 'full', got '{text}'")


def cmd_synth(args) -> int:
    spec = SynthSpec.from_dict(_read_json(args.spec, "Spec"))
    dataset = synth_generate(spec)
    parts = stratified_split(dataset, _parse_split(args.split), args.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        images, labels = SPLIT_FILES[name]
        write_idx(part, out / images, out / labels)
        logger.info(f"Wrote {len(part)} {name} samples to {out}")
    return 0


def cmd_partition(args) -> int:
    train, val, test = load_idx_dir(args.data)
    plan = PartitionPlan.from_dict(_read_json(args.plan, "Plan"))
    seed = plan.seed if args.seed is None else args.seed
    shards = build_partition(plan, train, val, test, seed=seed)
    save_manifest(args.out, plan, shards)

    print(f"institutions {len(shards)}")
    print("sizes " + " ".join(str(s.size) for s in shards))
    if len(shards) > 1:
        report = score_partition(shards)
        print(f"quantity_std {report.quantity_std:.4f}")
        print(f"mean_pairwise_ks {report.mean_pairwise_ks:.4f}")
    return 0


def _train_settings(args) -> Dict:
    """Config-file values first, command-line flags on top."""
    settings = dict(TRAIN_DEFAULTS)
    if args.config:
        data = _read_json(args.config, "Config")
        unknown = sorted(set(data) - set(TRAIN_DEFAULTS))
        if unknown:
            raise ValueError(f"Unknown key '{unknown[0]}' in {args.config}")
        settings.update(data)
    for key in TRAIN_DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if settings["method"] is None:
        raise ValueError("--method is required (or 'method' in --config)")
    return settings


def cmd_train(args) -> int:
    settings = _train_settings(args)
    train, val, test = load_idx_dir(args.data)
    _, shards = load_manifest(args.manifest, train, val, test)

    cfg = ProtocolConfig(
        method=settings["method"],
        wp=bool(settings["wp"]),
        wl=bool(settings["wl"]),
        bn_avg=bool(settings["bn_avg"]),
        batch_size=None if settings["batch_size"] in (None, "full") else int(settings["batch_size"]),
        learning_rate=float(settings["learning_rate"]),
        epochs=int(settings["epochs"]),
        model_seed=derive_seed(settings["seed"], "model"),
        data_seed=derive_seed(settings["seed"], "data"),
        uniform_fedavg=bool(settings["uniform_fedavg"]),
        threads=int(settings["threads"]),
        trace=bool(settings["trace"]),
    )
    arch = arch_from_name(settings["arch"], train.image_shape, train.num_categories, settings["hidden"])

    validate_shards(shards, cfg)
    try:
        run = run_protocol(shards, cfg, arch)
    except ValueError as e:
        raise RuntimeError(f"Training failed: {e}")
    result = evaluate_run(
        run,
        [s.test for s in shards],
        cfg.method.value,
        cfg.mitigations,
        with_matrix=True,
        seeds={"seed": int(settings["seed"]), "model": cfg.model_seed, "data": cfg.data_seed},
    )
    data = result.to_dict()
    data["config"] = cfg.to_dict()
    if cfg.trace:
        data["trace"] = [step.tolist() for step in run.trace]

    Path(args.out).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    print(f"test_accuracy {result.test_accuracy:.4f}")
    print(f"selected_round {result.selected_round}")
    return 0


def cmd_experiment(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, threads=args.threads)
    out = Path(args.out or cfg.output_dir)
    for path in emit_report(report, out):
        print(path)
    failed = [c for c in report.cells if c.error is not None]
    for cell in failed:
        logger.warning(f"Cell {cell.partition} / {cell.protocol} failed: {cell.error}")
    return 0


def cmd_report(args) -> int:
    results = load_results(args.results)
    source = Path(args.results)
    out = args.out or (source if source.is_dir() else source.parent)
    for path in render_report(results, out):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log debug messages")
    common.add_argument("-q", "--quiet", action="store_true", help="log warnings and errors only")

    parser = argparse.ArgumentParser(
        prog="fedskew",
        description="Deterministic simulator of federated learning under data heterogeneity.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic IDX dataset")
    p.add_argument("--spec", required=True, help="JSON synth spec (num_categories, counts, image_size, seed, noise)")
    p.add_argument("--out", required=True, help="output directory for the IDX files")
    p.add_argument("--split", default="0.5,0.25,0.25", help="train,val,test fractions")
    p.add_argument("--seed", type=int, default=0, help="split seed")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", parents=[common], help="materialise a partition plan")
    p.add_argument("--data", required=True, help="directory holding train/val/test IDX files")
    p.add_argument("--plan", required=True, help="JSON partition plan")
    p.add_argument("--out", required=True, help="manifest file to write")
    p.add_argument("--seed", type=int, default=None, help="partition seed (overrides the plan's)")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", parents=[common], help="run one protocol on a manifest")
    p.add_argument("--data", required=True, help="directory holding train/val/test IDX files")
    p.add_argument("--manifest", required=True, help="partition manifest")
    p.add_argument("--config", default=None, help="JSON file with defaults for the flags below")
    p.add_argument("--method", choices=[m.value for m in Method], default=None)
    p.add_argument("--wp", action="store_const", const=True, default=None, help="proportional weighting")
    p.add_argument("--wl", action="store_const", const=True, default=None, help="class-weighted loss")
    p.add_argument("--bn-avg", dest="bn_avg", action="store_const", const=True, default=None,
                   help="average BN running statistics")
    p.add_argument("--uniform-fedavg", dest="uniform_fedavg", action="store_const", const=True, default=None,
                   help="uniform FedAVG aggregation weights")
    p.add_argument("--B", dest="batch_size", type=_parse_batch, default=None, help="minibatch size or 'full'")
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--arch", choices=sorted(ARCHITECTURES), default=None)
    p.add_argument("--hidden", type=int, default=None, help="hidden width of the mlp architectures")
    p.add_argument("--trace", action="store_const", const=True, default=None,
                   help="record parameters after every update")
    p.add_argument("--out", required=True, help="run result JSON to write")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", parents=[common], help="run an experiment configuration")
    p.add_argument("--config", required=True, help="JSON experiment configuration")
    p.add_argument("--out", default=None, help="output directory (default: the config's output_dir)")
    p.add_argument("--threads", type=int, default=None, help="cap on worker threads per round")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("report", parents=[common], help="re-render outputs from results.json")
    p.add_argument("--results", required=True, help="results directory or results.json")
    p.add_argument("--out", default=None, help="output directory (default: the results directory)")
    p.set_defaults(func=cmd_report)
    return parser


def _configure_logging(args) -> None:
    level = logging.INFO
    if getattr(args, "verbose", False):
        level = logging.DEBUG
    elif getattr(args, "quiet", False):
        level = logging.WARNING
    logging.getLogger().setLevel(level)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1

    _configure_logging(args)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        logger.error(f"Failed to run '{args.command}': {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
