import logging
import time
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler

from config import config

APP_LOGGER = "probe_gap"
CONSOLE_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
FILE_FORMAT = CONSOLE_FORMAT + " - %(pathname)s:%(lineno)d"


def setup_logging(log_dir=None, level=None):
    """Configure the harness logger: console at LOG_LEVEL, rotating file at DEBUG."""
    logger = logging.getLogger(APP_LOGGER)
    logger.setLevel(logging.DEBUG)
    logger.propagate = False
    if logger.handlers:
        return logger

    console_handler = logging.StreamHandler()
    console_handler.setLevel(getattr(logging, (level or config.LOG_LEVEL).upper(), logging.INFO))
    console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))

    file_handler = RotatingFileHandler(
        (log_dir or config.LOG_DIR) / "probe_gap.log",
        maxBytes=10 * 1024 * 1024,  # 10MB
        backupCount=5,
    )
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter(FILE_FORMAT))

    logger.addHandler(console_handler)
    logger.addHandler(file_handler)
    return logger


def get_logger(component: str) -> logging.Logger:
    """Child logger so records show which component emitted them (probe_gap.probes, ...)."""
    return logger.getChild(component)


@contextmanager
def log_duration(log: logging.Logger, what: str):
    """Log start and finish of a long step; yields a dict that receives `seconds`."""
    timing = {}
    start = time.perf_counter()
    log.info(f"{what} started")
    try:
        yield timing
    finally:
        timing["seconds"] = time.perf_counter() - start
        log.info(f"{what} finished in {timing['seconds']:.1f}s")


logger = setup_logging()
