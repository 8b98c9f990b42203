# src/wflow/pipeline/logging_utils.py
"""
Run logging: a text log and a JSON log per run directory, written by one
queue listener thread, plus the ``optional_logger`` convention used by the
library functions.
"""
from __future__ import annotations

import functools
import importlib.metadata
import logging
import platform
import socket
import sys
from datetime import datetime
from logging.handlers import QueueHandler, QueueListener, RotatingFileHandler
from multiprocessing import Queue
from pathlib import Path

try:
    from pythonjsonlogger.json import JsonFormatter  # v3+
except ImportError:
    from pythonjsonlogger import jsonlogger

    JsonFormatter = jsonlogger.JsonFormatter  # v2

__all__ = [
    "RUN_LOG_FILES",
    "archive_old_run_logs",
    "get_run_logger",
    "remove_queue_listener",
    "optional_logger",
    "RunLoggerAdapter",
    "get_run_log_context",
]

RUN_LOG_FILES = ("run.log", "run.jsonlog")
TEXT_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"
JSON_FIELDS = "%(asctime)s %(levelname)s %(name)s %(message)s %(experiment)s %(seed)s %(step)s %(status)s"

# one listener per interpreter
_listener: QueueListener | None = None


def archive_old_run_logs(run_dir: Path) -> list[Path]:
    """Move the logs of a previous run in `run_dir` to `run_dir/old_logs` with a timestamp suffix."""
    run_dir = Path(run_dir)
    stamp = datetime.now().strftime("%Y%m%d_%H%M%S")
    moved = []
    for name in RUN_LOG_FILES:
        current = run_dir / name
        if not current.exists():
            continue
        archive = run_dir / "old_logs"
        archive.mkdir(exist_ok=True)
        target = archive / f"{current.stem}_{stamp}{current.suffix}"
        current.rename(target)
        moved.append(target)
    return moved


def _file_handler(path: Path, formatter: logging.Formatter, max_mb: int, backups: int) -> RotatingFileHandler:
    handler = RotatingFileHandler(path, maxBytes=max_mb * 1_048_576, backupCount=backups)
    handler.setFormatter(formatter)
    return handler


def get_run_logger(name: str, run_dir: Path, verbose: bool = True,
                   max_mb: int = 10, backups: int = 3) -> logging.Logger:
    """
    Logger for one run writing ``run.log`` and ``run.jsonlog`` into `run_dir`.

    Records pass through a queue to a listener thread that owns the file
    handlers. Starting a new run logger stops the previous listener. Calling it
    again with the same `name` returns the configured logger unchanged.
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    archive_old_run_logs(run_dir)

    logger = logging.getLogger(name)
    if logger.handlers:
        return logger
    logger.setLevel(logging.INFO)
    logger.propagate = False

    text_fmt = logging.Formatter(TEXT_FORMAT, datefmt="%Y-%m-%d %H:%M:%S")
    handlers = [
        _file_handler(run_dir / RUN_LOG_FILES[0], text_fmt, max_mb, backups),
        _file_handler(run_dir / RUN_LOG_FILES[1], JsonFormatter(JSON_FIELDS), max_mb, backups),
    ]

    queue = Queue(-1)
    logger.addHandler(QueueHandler(queue))
    if verbose:
        console = logging.StreamHandler(sys.stdout)
        console.setFormatter(text_fmt)
        logger.addHandler(console)

    global _listener
    if _listener is not None:
        _listener.stop()
    _listener = QueueListener(queue, *handlers, respect_handler_level=True)
    _listener.start()
    return logger


def remove_queue_listener(logger: logging.Logger | logging.LoggerAdapter | None = None):
    """Flush and stop the listener, then detach the handlers of `logger` so its name can be reused."""
    global _listener
    if _listener is not None:
        _listener.stop()
        for handler in _listener.handlers:
            handler.close()
        _listener = None
    if isinstance(logger, logging.LoggerAdapter):
        logger = logger.logger
    if logger is None:
        return
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()


def optional_logger(fn):
    """Pass a module logger with a NullHandler to `fn` when the caller gives none."""
    @functools.wraps(fn)
    def wrapper(*args, logger: logging.Logger | None = None, **kw):
        if logger is None:
            logger = logging.getLogger(fn.__module__)
            if not logger.handlers:
                logger.addHandler(logging.NullHandler())
        return fn(*args, logger=logger, **kw)
    return wrapper


class RunLoggerAdapter(logging.LoggerAdapter):
    """Adds the run context to every record; per-call ``extra`` keys win."""

    def process(self, msg, kwargs):
        kwargs["extra"] = {**self.extra, **kwargs.get("extra", {})}
        return msg, kwargs


def _version(package: str) -> str:
    try:
        return importlib.metadata.version(package)
    except importlib.metadata.PackageNotFoundError:
        return "unknown"


def get_run_log_context(experiment: str, seed: int) -> dict:
    context = {"experiment": experiment, "seed": seed}
    context.update({f"{pkg}_version": _version(pkg) for pkg in ("wflow", "numpy", "scipy")})
    context.update(python_version=platform.python_version(), platform=platform.platform(),
                   machine=platform.machine(), hostname=socket.gethostname())
    return context
