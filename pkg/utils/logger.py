import logging
from contextlib import contextmanager
from pathlib import Path

import config as _cfg

LOG_LEVEL = getattr(_cfg, "LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
RUN_LOG_FILE = "run.log"

_loggers: dict[str, logging.Logger] = {}
_run_handlers: list[logging.Handler] = []


def get_logger(name: str = "offnadir"):
    logger = logging.getLogger(name)
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        logger.addHandler(handler)
        logger.setLevel(getattr(logging, LOG_LEVEL.upper(), logging.INFO))
        logger.propagate = False
    for h in _run_handlers:
        if h not in logger.handlers:
            logger.addHandler(h)
    _loggers[name] = logger
    return logger


@contextmanager
def run_log(out_dir: Path):
    """Mirror every offnadir logger into <out_dir>/run.log while the block runs."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / RUN_LOG_FILE, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    _run_handlers.append(handler)
    for logger in _loggers.values():
        logger.addHandler(handler)
    try:
        yield handler
    finally:
        _run_handlers.remove(handler)
        for logger in _loggers.values():
            logger.removeHandler(handler)
        handler.close()
