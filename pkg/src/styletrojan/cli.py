"""Command line surface: one subcommand per pipeline stage plus the full
pipeline and a synthetic-dataset generator.

The STYLETROJAN_OUT environment variable overrides the configured output
root; --out overrides both.
"""

import argparse
import json
import os
import sys

from .config import PIPELINE_STAGES, load_config
from .data import DatasetSpec, load_dataset
from .errors import ConfigError, ContractError, SchemaError
from .models import load_checkpoint
from .pipeline import PipelineError, run_pipeline, write_json
from .synthdata import generate_dataset

OUT_ENV_VAR = "STYLETROJAN_OUT"


def _load_and_override(args):
    config = load_config(args.config)
    env_out = os.environ.get(OUT_ENV_VAR)
    if env_out:
        config.out_dir = env_out
    if getattr(args, "out", None):
        config.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _add_common(parser):
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--out", help="output root directory (overrides config)")
    parser.add_argument("--seed", type=int, help="master seed (overrides config)")
    parser.add_argument("--resume", action="store_true",
                        help="skip stages whose checkpoints already exist")


def _run_stages(args, stages):
    config = _load_and_override(args)
    config.stages = list(stages)
    report = run_pipeline(config, resume=args.resume)
    print(f"report: {os.path.join(config.out_dir, config.experiment_id, 'reports', 'experiment.json')}")
    for stage, seconds in report.timings.items():
        print(f"  {stage}: {seconds:.1f}s")
    return 0


def _cmd_stage(stage):
    def handler(args):
        return _run_stages(args, [stage])
    return handler


def cmd_pipeline(args):
    config = _load_and_override(args)
    stages = [args.stage] if args.stage else config.stages
    config.stages = stages
    report = run_pipeline(config, resume=args.resume)
    print(json.dumps({"stages_run": report.stages_run, "errors": report.errors}, indent=2))
    return 0


def cmd_make_dataset(args):
    generate_dataset(args.out, per_class_train=args.per_class_train,
                     per_class_test=args.per_class_test, n_style=args.style,
                     image_size=args.image_size, seed=args.seed, n_classes=args.classes)
    print(f"dataset written to {args.out}")
    return 0


def cmd_scan(args):
    from . import scanners
    config = _load_and_override(args)
    if args.method:
        config.scan.methods = [args.method]
    if not args.checkpoint:
        config.stages = ["scan"]
        run_pipeline(config, resume=args.resume)
        return 0
    spec = DatasetSpec(layout=config.dataset.layout, image_size=config.dataset.image_size,
                       classes=config.dataset.classes, split_fraction=config.dataset.split_fraction,
                       seed=config.dataset.seed, style_path=config.dataset.style_path)
    bundle = load_dataset(config.dataset.root, spec)
    model, header = load_checkpoint(args.checkpoint, image_shape=bundle.image_shape)
    samples = bundle.test[:config.scan.sample_count]
    out_dir = os.path.join(config.out_dir, config.experiment_id, "reports")
    for method in config.scan.methods:
        if method == "nc":
            cfg = scanners.NcScanConfig(config.scan.nc_steps, config.scan.nc_lr,
                                        config.scan.nc_mask_weight, config.scan.nc_batch,
                                        seed=config.seed)
            rep = scanners.nc_scan(model, samples, cfg)
        else:
            cfg = scanners.AbsScanConfig(tuple(config.scan.abs_stim_levels), config.scan.abs_top_k,
                                         config.scan.abs_re_steps, config.scan.abs_re_lr,
                                         config.scan.abs_asr_threshold, seed=config.seed)
            rep = scanners.abs_scan(model, samples, cfg)
        path = write_json(rep.to_dict(), os.path.join(out_dir, f"scan_{method}_{header['stage']}.json"))
        print(f"{method}: flagged={rep.flagged} -> {path}")
    return 0


def cmd_robustness(args):
    config = _load_and_override(args)
    if args.suite:
        config.robustness.suites = [args.suite]
    config.stages = ["robustness"]
    run_pipeline(config, resume=args.resume)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="styletrojan",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="write the synthetic toy dataset (PNG tree + style set)")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class-train", type=int, default=180)
    p.add_argument("--per-class-test", type=int, default=40)
    p.add_argument("--style", type=int, default=120)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_make_dataset)

    for stage in ("train-clean", "train-generator", "poison", "detox", "evaluate"):
        p = sub.add_parser(stage, help=f"run the {stage} stage")
        _add_common(p)
        p.set_defaults(handler=_cmd_stage(stage))

    p = sub.add_parser("scan", help="run backdoor scanners")
    _add_common(p)
    p.add_argument("--method", choices=["nc", "abs"])
    p.add_argument("--checkpoint", help="scan this checkpoint instead of the pipeline's final model")
    p.set_defaults(handler=cmd_scan)

    p = sub.add_parser("robustness", help="run the robustness battery")
    _add_common(p)
    p.add_argument("--suite", choices=["adv", "smooth", "transforms"])
    p.set_defaults(handler=cmd_robustness)

    p = sub.add_parser("pipeline", help="run all configured stages in order")
    _add_common(p)
    p.add_argument("--stage", choices=list(PIPELINE_STAGES), help="run a single stage")
    p.set_defaults(handler=cmd_pipeline)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, ContractError, SchemaError, PipelineError, IOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
