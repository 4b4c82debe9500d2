"""
Command-line entry point.

    python -m app.cli pretrain   --config configs/ring_region.ini --seed 0 --out runs/base
    python -m app.cli finetune   --config configs/ring_region.ini --pretrained runs/base --method hrf --preset baseline
    python -m app.cli eval       --config configs/ring_region.ini --out runs/hrf
    python -m app.cli report     runs/hrf-* --out runs/summary.csv

Exit codes: 0 success, 1 configuration error or usage error, 2 run aborted.
"""
import argparse
import logging
import sys
from typing import List, Optional

from .config import available_presets, load_run_config
from .errors import ConfigError, NumericalError, RewardError, UsageError
from .logging_config import configure_logging
from .pipeline import STAGES, report, run_pipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_ABORT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here share the config exit code."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hrf", description="Hierarchical reward fine-tuning of toy diffusion models")
    parser.add_argument("--log-level", default=None, help="Override HRF_LOG_LEVEL")
    parser.add_argument("--json-logs", action="store_true", help="Emit JSON-lines logs")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for stage in STAGES:
        p = sub.add_parser(stage, help=f"Run the {stage} stage")
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="Master seed")
        p.add_argument("--out", help="Run directory")
        p.add_argument("--preset", help=f"Window preset ({', '.join(available_presets()) or 'none found'})")
        p.add_argument("--method", choices=["ddpo", "hrf", "hrf-d"], help="Fine-tuning method")
        p.add_argument("--pretrained", help="Pretrain run directory holding the base denoiser")

    p = sub.add_parser("report", help="Aggregate metrics/report.csv across run directories")
    p.add_argument("runs", nargs="+", help="Run directories")
    p.add_argument("--out", required=True, help="Output CSV")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level, True if args.json_logs else None)

    try:
        if args.command == "report":
            path = report(args.runs, args.out)
            print(path)
            return EXIT_OK
        config = load_run_config(args.config, seed=args.seed, out_dir=args.out, preset=args.preset,
                                 method=args.method, pretrained_dir=args.pretrained)
        result = run_pipeline(config, args.command)
        print(result.out_dir)
        return EXIT_OK
    except (ConfigError, FileNotFoundError) as e:
        logger.error(f"CONFIG ERROR: command={args.command}, error='{e}'")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalError, RewardError, UsageError) as e:
        logger.error(f"RUN ABORTED: command={args.command}, type={type(e).__name__}, error='{e}'")
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
