"""``metricseg gen|train|segment|eval|bench`` command line.

Exit codes: 0 success, 1 invalid input or configuration, 2 I/O failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from metricseg.config import load_config
from metricseg.errors import ValidationError
from metricseg.model import load_checkpoint, save_checkpoint
from metricseg import pipeline

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value file (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", type=Path, required=True, help="output path")
    common.add_argument("-q", "--quiet", action="store_true")

    p = _Parser(prog="metricseg", description="metric-learning instance segmentation of point clouds")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="write synthetic labeled scenes")
    g.add_argument("--count", type=int, default=1)

    t = sub.add_parser("train", parents=[common], help="train a model, write a checkpoint")
    t.add_argument("--scenes", type=Path, required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--resume", type=Path, help="continue from this checkpoint")

    s = sub.add_parser("segment", parents=[common], help="label a scene file or directory")
    s.add_argument("--checkpoint", type=Path, required=True)
    s.add_argument("--input", type=Path, required=True)

    e = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    e.add_argument("--pred", type=Path, required=True)
    e.add_argument("--gt", type=Path, required=True)

    b = sub.add_parser("bench", parents=[common], help="time the inference stages")
    b.add_argument("--scenes", type=Path, required=True)
    b.add_argument("--checkpoint", type=Path)
    b.add_argument("--runs", type=int)
    return p


def _run(args):
    cfg = load_config(args.config, seed=args.seed)
    if args.command == "gen":
        pipeline.gen_scenes(cfg, args.count, args.out)
    elif args.command == "train":
        clouds = pipeline.load_scenes(args.scenes)
        state = load_checkpoint(args.resume) if args.resume else None
        state, _ = pipeline.train(cfg, clouds, state=state, steps=args.steps)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(state, args.out)
    elif args.command == "segment":
        state = load_checkpoint(args.checkpoint)
        if args.input.is_dir():
            pipeline.segment_files(state, cfg, pipeline.scene_files(args.input), args.out)
        else:
            args.out.parent.mkdir(parents=True, exist_ok=True)
            seg = pipeline.segment_cloud(state, pipeline.read_point_cloud(args.input), cfg)
            pipeline.write_segmentation(seg, args.out)
    elif args.command == "eval":
        report = pipeline.evaluate_dirs(args.pred, args.gt, args.out)
        print(report.table(pipeline.CLASS_NAMES), end="")
    elif args.command == "bench":
        state = load_checkpoint(args.checkpoint) if args.checkpoint else pipeline.new_model(cfg)
        report = pipeline.bench(state, pipeline.load_scenes(args.scenes), cfg, args.runs)
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(report.text())
        print(report.text(), end="")


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        _run(args)
    except ValidationError as exc:
        print(f"metricseg: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"metricseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
