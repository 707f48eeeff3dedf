"""Command-line entry point: ``numis <subcommand> --config <path> [--force] [--seed N]``.

Exit codes: 0 success, 1 usage, 2 data error or missing prerequisite, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import pipeline, synth
from .checkpoint import CheckpointError
from .saliency import NonFiniteScore
from .segment import ImageTooSmall
from .tensor import ShapeError
from .train import NonFiniteLossError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="numis", description="Weakly supervised coin concept recognition pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for stage in (*pipeline.STAGES, "all"):
        p = sub.add_parser(stage, help="run every stage in order" if stage == "all" else f"run the {stage} stage")
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--force", action="store_true", help="re-run even if inputs are unchanged")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
    s = sub.add_parser("synth", help="write a synthetic two-coin corpus and a matching config")
    s.add_argument("--out", required=True, type=Path, help="directory for the corpus and config")
    s.add_argument("--images", type=int, default=600)
    s.add_argument("--concepts", nargs="+", default=["eagle", "horse", "shield"], choices=synth.GLYPHS)
    s.add_argument("--noise", type=float, default=0.1)
    s.add_argument("--prevalence", type=float, default=0.3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument(
        "--distractors",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="let unlabelled glyphs appear on reverses too",
    )
    return parser


def run_synth(args) -> dict:
    if args.images < 1 or not 0 <= args.noise <= 1 or not 0 < args.prevalence <= 1:
        raise pipeline.UsageError("need --images >= 1, --noise in [0, 1] and --prevalence in (0, 1]")
    samples = synth.make_corpus(
        args.out / "corpus", args.images, args.concepts, args.seed, args.prevalence, args.noise, args.distractors
    )
    config = {"seed": args.seed, "output_root": "out", "corpus": {"input_dir": "corpus"}, "concepts": list(args.concepts)}
    cfg_path = args.out / "numis.yaml"
    cfg_path.write_text(yaml.safe_dump(config, sort_keys=False))
    truth = {s.image_id: {"present": s.present, "mentioned": s.mentioned} for s in samples}
    (args.out / "ground_truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    return {"images": len(samples), "config": str(cfg_path)}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            summary = run_synth(args)
        else:
            cfg = pipeline.PipelineConfig.load(args.config, args.seed)
            stages = pipeline.STAGES if args.command == "all" else (args.command,)
            summary = {s: pipeline.run_stage(cfg, s, args.force) for s in stages}
            if len(stages) == 1:
                summary = summary[args.command]
    except pipeline.UsageError as exc:
        print(f"numis: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, NonFiniteScore, FloatingPointError) as exc:
        print(f"numis: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pipeline.PipelineError, CheckpointError, ImageTooSmall, ShapeError, KeyError, ValueError, OSError) as exc:
        print(f"numis: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
