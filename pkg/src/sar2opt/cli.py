"""Command-line entry point: ``sar2opt <command> [--config FILE]``.

Exit codes: 0 success, 2 invalid input or config, 3 missing or corrupt
upstream artifact, 4 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import pipeline
from .config import ExperimentConfig, dump_config, load_config, smoke_config
from .errors import Sar2OptError

EXIT_OK, EXIT_INVALID, EXIT_UPSTREAM, EXIT_NUMERIC = 0, 2, 3, 4


class JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps(
            {"time": round(time.time(), 3), "level": record.levelname, "logger": record.name, "message": record.getMessage()},
            sort_keys=True,
        )


def _setup_logging(verbose: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.INFO if verbose else logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sar2opt", description="Synthetic SAR-to-optical translation pipeline.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress as JSON lines on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        p.add_argument("--workdir", help="override the config's work directory")
        p.add_argument("--seed", type=int, help="override the root seed")
        return p

    add("synth", "generate the paired synthetic dataset")
    add("train-teacher", "fine-tune the optical teacher")
    add("distill", "distil the SAR student from the teacher")
    add("train-translator", "train the conditional denoiser")
    p = add("translate", "translate SAR images to optical")
    p.add_argument("--input", help="directory of *_sar.png images (default: dataset test split)")
    p.add_argument("--out", help="output directory for generated PNGs")
    p = add("evaluate", "score generated images against references")
    p.add_argument("--pred", help="directory of generated PNGs")
    p.add_argument("--ref", help="directory of reference PNGs")
    p.add_argument("--teacher", help="teacher checkpoint stem for eFID/eKID features")
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--strict", action="store_true", help="fail on unmatched files")
    p = sub.add_parser("init-config", help="print a config file to start from")
    p.add_argument("--smoke", action="store_true", help="the fast 200-scene configuration")
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.workdir:
        cfg.workdir = args.workdir
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.apply_root_seed()
    return cfg


def run(args) -> int:
    if args.command == "init-config":
        print(dump_config(smoke_config() if args.smoke else ExperimentConfig()), end="")
        return EXIT_OK
    cfg = _config(args)
    if args.command == "synth":
        print(pipeline.cmd_synth(cfg))
    elif args.command == "train-teacher":
        print(pipeline.cmd_train_teacher(cfg))
    elif args.command == "distill":
        print(pipeline.cmd_distill(cfg))
    elif args.command == "train-translator":
        print(pipeline.cmd_train_translator(cfg))
    elif args.command == "translate":
        print(pipeline.cmd_translate(cfg, args.input, args.out))
    elif args.command == "evaluate":
        report = pipeline.cmd_evaluate(cfg, args.pred, args.ref, args.out, args.strict or None, args.teacher)
        print(report.table())
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return run(args)
    except Sar2OptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
