"""Command-line interface for the Corona Stereo Pipeline."""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from .config import PipelineConfig, load_config
from .errors import EXIT_OK, EXIT_UNEXPECTED, CospError, error_payload, exit_code_for
from .output import print_summary, write_json
from .pipeline import STAGES, run_order, run_stage
from .utils import resolve_jobs

# Configuration Constants
DEFAULT_CONFIG = "config/synthetic.toml"
LOG_FILE_ENV_VAR = "COSP_LOG_FILE"
LOG_FILE_NAME = "cosp.log"
VERBS = STAGES + ("run",)


def configure_logging(verbose: bool = False, log_file: Optional[str] = LOG_FILE_NAME) -> None:
    """Configure logging with console and (optional) file output."""
    level = logging.DEBUG if verbose else logging.INFO
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(log_file, mode='a'))

    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    """Parse command-line arguments."""
    parser = argparse.ArgumentParser(
        prog="cosp",
        description="Corona Stereo Pipeline - DEMs from declassified panoramic stereo film",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  %(prog)s run                               # Whole pipeline on the default synthetic config
  %(prog)s synth --config config/synthetic.toml
  %(prog)s adjust --config my_run.toml --jobs 4
  %(prog)s report --config my_run.toml --verbose

Stages (in order):
  synth, filmprep, gcp-plan, gcp-assemble, adjust, rectify, match, dem, coregister, report

Exit codes:
  0 success, 1 unexpected error, 2 config error, 3 data error, 4 numerical failure
        """
    )
    parser.add_argument(
        'verb',
        choices=VERBS,
        help='Stage to run, or "run" for all stages in order'
    )
    parser.add_argument(
        '--config',
        type=str,
        default=DEFAULT_CONFIG,
        help=f'Path to the TOML/JSON run config (default: {DEFAULT_CONFIG})'
    )
    parser.add_argument(
        '--jobs',
        type=int,
        default=None,
        help='Worker count (overrides COSP_JOBS and the config)'
    )
    parser.add_argument(
        '--verbose',
        action='store_true',
        help='Enable verbose debug logging'
    )
    parser.add_argument(
        '--quiet',
        action='store_true',
        help='Suppress the summary printed at the end'
    )
    return parser.parse_args(argv)


def _write_error(config: Optional[PipelineConfig], stage: str, exc: BaseException) -> None:
    if config is None:
        return
    try:
        write_json(error_payload(stage, exc), config.run_dir / "error.json")
    except OSError as e:
        logging.getLogger(__name__).error(f"Could not write error.json: {e}")


def main(args: Optional[argparse.Namespace] = None) -> int:
    """
    Main entry point for the Corona Stereo Pipeline.

    Returns:
        0 on success, the error category's exit code otherwise
    """
    if args is None:
        args = parse_arguments()

    load_dotenv()
    logger = logging.getLogger(__name__)
    config: Optional[PipelineConfig] = None
    stage = args.verb

    try:
        config = load_config(args.config)
        configure_logging(args.verbose, os.getenv(LOG_FILE_ENV_VAR) or str(config.run_dir / LOG_FILE_NAME))
        jobs = resolve_jobs(args.jobs, config.run.jobs)
        logger.info(f"cosp {args.verb} with config '{args.config}' ({jobs} job(s))")

        if args.verb == "run":
            contexts = []
            for name in run_order(config):
                stage = name
                contexts.append(run_stage(name, config, jobs))
        else:
            contexts = [run_stage(args.verb, config, jobs)]

        if not args.quiet:
            lines = [f"{ctx.name}: {len(ctx.outputs)} output(s)" for ctx in contexts]
            summary = config.run_dir / "report" / "summary.txt"
            if args.verb in ("run", "report") and summary.exists():
                lines += ["", *summary.read_text(encoding="utf-8").splitlines()]
            print_summary(lines, title=f"COSP {args.verb.upper()} - {config.run_dir}")
        logger.info("Completed successfully")
        return EXIT_OK

    except CospError as e:
        if config is None:
            configure_logging(args.verbose, None)
        logger.error(f"Stage '{stage}' failed ({e.category}): {type(e).__name__}: {e}")
        _write_error(config, stage, e)
        return exit_code_for(e)
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        _write_error(config, stage, e)
        return EXIT_UNEXPECTED
