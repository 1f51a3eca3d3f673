# utils/logging_setup.py

import logging
import os
import sys
from typing import Optional

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def _level(level: str) -> int:
    numeric_level = getattr(logging, str(level).upper(), None)
    return numeric_level if isinstance(numeric_level, int) else logging.INFO


def setup_logging(log_file: Optional[str], level: str = "INFO") -> logging.Logger:
    """
    Configure logging to file and console.

    The file always receives DEBUG records (iteration traces, per-replicate notes);
    the console shows ``level`` and up on stderr, leaving stdout to command results.

    :param log_file: Path to the log file. An empty value logs to the console only.
    :param level: Console level as a string (e.g., "DEBUG", "INFO").
    :return: The configured root logger.
    """
    console_level = _level(level)
    formatter = logging.Formatter(LOG_FORMAT)

    logger = logging.getLogger()
    # Remove all existing handlers to prevent duplicate logs
    if logger.hasHandlers():
        logger.handlers.clear()

    if log_file:
        log_dir = os.path.dirname(log_file)
        try:
            if log_dir:
                os.makedirs(log_dir, exist_ok=True)
            file_handler = logging.FileHandler(log_file, encoding='utf-8')
            file_handler.setLevel(logging.DEBUG)
            file_handler.setFormatter(formatter)
            logger.addHandler(file_handler)
        except OSError as e:
            print(f"Failed to set up log file '{log_file}': {e}", file=sys.stderr)

    stream_handler = logging.StreamHandler(sys.stderr)
    stream_handler.setLevel(console_level)
    stream_handler.setFormatter(formatter)
    logger.addHandler(stream_handler)

    logger.setLevel(min([h.level for h in logger.handlers]))
    logger.debug(f"Logging to {log_file or 'console only'}, console level {logging.getLevelName(console_level)}.")
    return logger
