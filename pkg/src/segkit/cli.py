"""``segkit`` command line.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .errors import (ConfigError, DataError, FormatError, ManifestError, NoTumorError,
                     SegkitError)
from .pipeline import RunConfig

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override run/model/shuffle seed")
    common.add_argument("--threads", type=int, help="worker threads for per-case stages")
    common.add_argument("--output", help="output directory")
    common.add_argument("--data", help="dataset root directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="segkit", description="brain tumour segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("preprocess", parents=[common], help="crop, detect, resize, normalise")
    sub.add_parser("detect", parents=[common], help="tumour detection only")
    p = sub.add_parser("train", parents=[common], help="train the attention U-Net")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-after", type=int, help="stop after this many global epochs")
    p = sub.add_parser("evaluate", parents=[common], help="metrics on a split")
    p.add_argument("--checkpoint", help="checkpoint path (default: <output>/checkpoint.aunc)")
    p.add_argument("--split", choices=["train", "val", "all"])
    sub.add_parser("report", parents=[common], help="summarise evaluation results")
    p = sub.add_parser("export-slices", parents=[common], help="write PGM slices of a volume")
    p.add_argument("volume")
    p.add_argument("--axis", default="axial")
    p = sub.add_parser("config", parents=[common], help="configuration helpers")
    p.add_argument("action", choices=["init", "show"])
    p.add_argument("path", nargs="?", help="where to write (init); default stdout")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.with_seed(args.seed)
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.output:
        cfg.output_dir = args.output
    if args.data:
        cfg.dataset_root = args.data
    return cfg


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        cmd = args.command
        if cmd == "config":
            text = json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
            if args.path:
                with open(args.path, "w") as fh:
                    fh.write(text)
            else:
                sys.stdout.write(text)
        elif cmd == "preprocess":
            result = pipeline.cmd_preprocess(cfg)
            print(f"processed {len(result['processed'])} case(s), "
                  f"{len(result['failed'])} failure(s)")
        elif cmd == "detect":
            reports = pipeline.cmd_detect(cfg)
            print(f"detected tumours in {len(reports)} case(s)")
        elif cmd == "train":
            ckpt = pipeline.cmd_train(cfg, resume=args.resume, stop_after=args.stop_after)
            print(f"trained to epoch {ckpt.epoch}, loss {ckpt.history[-1]['loss']:.4f}")
        elif cmd == "evaluate":
            if args.split:
                cfg.eval_split = args.split
            pipeline.cmd_evaluate(cfg, args.checkpoint)
            print(pipeline.format_report(pipeline.cmd_report(cfg)))
        elif cmd == "report":
            print(pipeline.format_report(pipeline.cmd_report(cfg)))
        elif cmd == "export-slices":
            paths = pipeline.cmd_export_slices(args.volume, args.axis, cfg.output_dir)
            print(f"wrote {len(paths)} slice(s) to {cfg.output_dir}")
    except ConfigError as exc:
        print(f"segkit: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, ManifestError, NoTumorError, OSError) as exc:
        print(f"segkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SegkitError, AssertionError) as exc:
        print(f"segkit: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
