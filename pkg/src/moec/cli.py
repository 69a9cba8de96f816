"""Command-line interface orchestrating the pipeline stages."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import pipeline
from .config import RunConfig
from .errors import MoecError


def _apply_threads_env():
    threads = os.environ.get("MOEC_THREADS")
    if not threads:
        return
    try:
        n = max(int(threads), 1)
    except ValueError:
        return
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _parse_layers(text):
    """'2', '0,2' and '1-3' forms."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moec",
        description="Convert a trained vision transformer into a mixture-of-experts "
                    "model by clustering MLP activations and extracting expert "
                    "subnetworks.")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = ("train", "capture", "extract", "assemble", "eval", "finetune",
                "analyze", "ablate", "stability", "export-patches", "report")
    for name in commands:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config JSON path")
        p.add_argument("--out", default="out", help="artifact directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--min-cluster-frac", type=float, default=None)
        p.add_argument("--extract-pct", type=float, default=None)
        p.add_argument("--criterion", choices=("variance", "magnitude", "random"),
                       default=None)
        p.add_argument("--metric", choices=("cosine", "euclidean"), default=None)
        p.add_argument("--layers", default=None,
                       help="layer list/range, e.g. '3' or '1-3' or '0,2'")
        if name == "eval":
            p.add_argument("--model", default=None, help="model file to evaluate")
        if name == "ablate":
            p.add_argument("--presets", default=",".join(pipeline.ABLATION_PRESETS))
        if name == "stability":
            p.add_argument("--sizes", default=None, help="comma-separated image counts")
            p.add_argument("--stability-seeds", default=None,
                           help="comma-separated seeds")
        if name == "export-patches":
            p.add_argument("--expert", type=int, required=True)
            p.add_argument("--max-patches", type=int, default=32)
    return parser


def load_config(args) -> RunConfig:
    d = RunConfig.load(args.config).to_dict()
    if args.seed is not None:
        d["seed"] = args.seed
    if args.min_cluster_frac is not None:
        d.setdefault("clustering", {})["min_cluster_size_fraction"] = args.min_cluster_frac
    if args.extract_pct is not None:
        d.setdefault("extraction", {})["extraction_percentage"] = args.extract_pct
    if args.criterion is not None:
        d.setdefault("extraction", {})["criterion"] = args.criterion
    if args.metric is not None:
        d["routing_metric"] = args.metric
    if args.layers is not None:
        d.setdefault("capture", {})["layers"] = _parse_layers(args.layers)
    return RunConfig.from_dict(d)


def main(argv=None) -> int:
    _apply_threads_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args)
        if args.command == "train":
            summary = pipeline.stage_train(cfg, args.out)
        elif args.command == "capture":
            summary = pipeline.stage_capture(cfg, args.out)
        elif args.command == "extract":
            summary = pipeline.stage_extract(cfg, args.out)
        elif args.command == "assemble":
            summary = pipeline.stage_assemble(cfg, args.out)
        elif args.command == "eval":
            summary = pipeline.stage_eval(cfg, args.out, model_path=args.model)
        elif args.command == "finetune":
            summary = pipeline.stage_finetune(cfg, args.out)
        elif args.command == "analyze":
            summary = pipeline.stage_analyze(cfg, args.out)
        elif args.command == "ablate":
            presets = tuple(p for p in args.presets.split(",") if p)
            summary = pipeline.stage_ablate(cfg, args.out, presets=presets)
        elif args.command == "stability":
            sizes = ([int(s) for s in args.sizes.split(",")]
                     if args.sizes else None)
            seeds = ([int(s) for s in args.stability_seeds.split(",")]
                     if args.stability_seeds else None)
            summary = pipeline.stage_stability(cfg, args.out, sizes=sizes, seeds=seeds)
        elif args.command == "export-patches":
            layers = _parse_layers(args.layers) if args.layers else cfg.capture.layers
            summary = pipeline.stage_export_patches(cfg, args.out, layers[0],
                                                    args.expert, args.max_patches)
        else:
            summary = pipeline.stage_report(cfg, args.out)
    except MoecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
