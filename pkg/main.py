#!/usr/bin/env python3
"""
roadsplat - road surface reconstruction with Gaussian surfels
Command-line entry point: reconstruct, evaluate, synth
"""

import argparse
import json
import os
import sys
import uuid
from typing import List, Optional

from pydantic import ValidationError

# Add project root to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from roadsplat import __version__
from roadsplat.cli import evaluate, reconstruct, synth
from roadsplat.core.config import get_settings
from roadsplat.core.exceptions import InputError, RoadSplatError
from roadsplat.core.logging import get_logger, run_id_var, setup_logging

logger = get_logger(__name__)

EXIT_INPUT = InputError.exit_code
EXIT_NUMERICAL = 2


def build_parser() -> argparse.ArgumentParser:
    settings = get_settings()
    parser = argparse.ArgumentParser(prog="roadsplat", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--version", action="version", version=f"roadsplat {__version__}")
    parser.add_argument("--log-level", default=settings.LOG_LEVEL, help="DEBUG, INFO, WARNING, ERROR")
    subparsers = parser.add_subparsers(dest="command", required=True)
    reconstruct.add_parser(subparsers)
    evaluate.add_parser(subparsers)
    synth.add_parser(subparsers)
    return parser


def _report(error: dict) -> None:
    print(json.dumps(error, sort_keys=True, default=str), file=sys.stderr)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    run_id_var.set(uuid.uuid4().hex[:12])

    try:
        return args.handler(args)
    except RoadSplatError as e:
        logger.error(
            f"{args.command} failed: {e.message}",
            exc_info=True,
            extra={"code": e.code, "details": e.details},
        )
        _report(e.to_detail().model_dump())
        return e.exit_code
    except ValidationError as e:
        fields = [".".join(str(p) for p in err["loc"]) for err in e.errors()]
        logger.error(f"{args.command} failed: invalid options", extra={"fields": fields})
        _report({"code": "invalid_options", "message": "invalid options", "details": {"fields": fields}})
        return EXIT_INPUT
    except Exception as e:
        logger.error(f"{args.command} failed unexpectedly: {e}", exc_info=True)
        _report({"code": "internal_error", "message": str(e), "details": None})
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
