"""
Colored logging setup shared by the CLI, the Dagster job and library modules.
"""

import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

import colorlog

from src.config import LOG_DIR, LOG_LEVEL

LOG_COLORS = {
    "DEBUG": "cyan",
    "INFO": "green",
    "WARNING": "yellow",
    "ERROR": "red",
    "CRITICAL": "red,bg_white",
}


def setup_logging(
    name: str = "src",
    log_dir: Optional[Union[str, Path]] = LOG_DIR,
    level: str = LOG_LEVEL,
) -> logging.Logger:
    """
    Configure colored console logging and an optional run log file.

    Library modules log through children of the "src" logger, so configuring
    it once here routes every stage's messages.

    Args:
        name: Logger name to configure
        log_dir: Directory for a timestamped DEBUG log file (None disables it)
        level: Console log level

    Returns:
        The configured logger
    """
    logger = colorlog.getLogger(name)
    logger.setLevel(colorlog.DEBUG)

    if getattr(logger, "_valve_configured", False):
        return logger

    console_handler = colorlog.StreamHandler(sys.stdout)
    console_handler.setLevel(level.upper())
    console_format = colorlog.ColoredFormatter(
        "%(log_color)s%(levelname)s%(reset)s - %(message)s",
        log_colors=LOG_COLORS,
    )
    console_handler.setFormatter(console_format)
    logger.addHandler(console_handler)

    if log_dir:
        log_path = Path(log_dir)
        log_path.mkdir(parents=True, exist_ok=True)
        log_file = log_path / f"{name}_{datetime.now().strftime('%Y%m%d_%H%M%S')}.log"
        file_handler = colorlog.StreamHandler(open(log_file, "w", encoding="utf-8"))
        file_handler.setLevel(colorlog.DEBUG)
        file_format = colorlog.ColoredFormatter(
            "%(asctime)s - %(levelname)s - %(name)s - %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S",
            no_color=True,
        )
        file_handler.setFormatter(file_format)
        logger.addHandler(file_handler)

    logger._valve_configured = True
    return logger
