#!/usr/bin/env python3
"""
Console entry point for fpm-singleshot.

Each subcommand maps to one pipeline stage. Exit codes: 0 success, 2 bad
configuration or inputs, 3 numeric failure, 4 I/O failure, 1 anything else.
On failure a single ``error category=... stage=... message="..."`` line is
written to stderr.
"""
import argparse
import sys
from typing import List, Optional

from progress.errors import ErrorManager
from .main import COMMANDS, DEFAULT_CONFIG_PATH, FpmApplication

_HELP = {
    "phantom": "generate phantoms (phantoms/phantom_###.fpma)",
    "simulate": "render single-LED stacks, or pattern images with --checkpoint",
    "calibrate": "fit the noise slope from repeated frames",
    "reconstruct": "iterative reconstruction of every stack",
    "train": "jointly train the LED pattern and the CNN",
    "finetune": "fine-tune the CNN on measured pattern images",
    "predict": "single-shot prediction from pattern images",
    "report": "images, plots and a metrics summary of the run",
}
_INPUT = {"simulate", "calibrate", "reconstruct", "train", "finetune", "predict"}
_CHECKPOINT = {"simulate", "finetune", "predict"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpm-singleshot")
    parser.add_argument("--config", help="Path to configuration file", default=DEFAULT_CONFIG_PATH)
    parser.add_argument("--seed", type=int, default=None, help="Override the config seed")
    parser.add_argument("--no-progress", dest="progress", action="store_false",
                        help="Do not render progress bars")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name])
        if name in _INPUT:
            p.add_argument("-i", "--input", dest="input_path", default=None,
                           help="Input array file or directory (defaults to the previous stage's output)")
        if name in _CHECKPOINT:
            p.add_argument("--checkpoint", default=None, help="Checkpoint directory")
    return parser


def run_cli(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the subcommand and return the exit code.

    Configuration errors raised before the output directory exists are
    reported on stderr only; nothing is written.
    """
    args = build_parser().parse_args(argv)
    kwargs = {k: getattr(args, k) for k in ("input_path", "checkpoint") if hasattr(args, k)}
    try:
        app = FpmApplication(args.config, seed=args.seed, show_progress=args.progress)
    except Exception as exc:
        report = ErrorManager().report_error(exc, "setup")
        sys.stderr.write(report.one_line() + "\n")
        return report.exit_code
    return app.run(args.command, **kwargs)


def main(argv: Optional[List[str]] = None):
    """Console entry point used by setuptools' console_scripts."""
    sys.exit(run_cli(argv))


if __name__ == "__main__":
    main()
