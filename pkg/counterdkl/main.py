"""
counterdkl - Main entry point
Configures logging and dispatches CLI commands
"""

import sys
from pathlib import Path
from typing import List, Optional

from loguru import logger
from pydantic import ValidationError

from counterdkl.cli import COMMANDS, parse_args
from counterdkl.config import settings
from counterdkl.errors import CounterDKLError


def setup_logging(level: Optional[str] = None) -> None:
    """stderr sink at the configured level, plus a rotating file sink when settings.log_file is set"""
    logger.remove()
    level = (level or ("DEBUG" if settings.debug else settings.log_level)).upper()
    logger.add(sys.stderr, level=level, format="<green>{time:HH:mm:ss}</green> | <level>{level: <8}</level> | {message}")
    if settings.log_file:
        Path(settings.log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(settings.log_file, level=level, rotation=settings.log_rotation, encoding="utf-8")


def main(argv: Optional[List[str]] = None) -> int:
    """
    Run one CLI command

    Returns:
        0 on success, 2 on a library error, 1 on anything else
    """
    args = parse_args(argv)
    setup_logging(args.log_level)
    logger.debug(f"🚀 {settings.app_name} {settings.app_version} ({settings.environment}): {args.command}")
    try:
        return COMMANDS[args.command](args)
    except (CounterDKLError, ValidationError) as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        return 2
    except Exception as e:
        logger.exception(f"❌ Unexpected error in {args.command}: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
