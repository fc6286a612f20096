"""
Logging configuration for roadsplat
Structured JSON logging with run context (run id, scene, training step)
"""

import contextvars
import functools
import json
import logging
import sys
import time
from datetime import datetime, timezone
from typing import Any, Dict, Optional

run_id_var: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar(
    "run_id", default=None
)
scene_var: contextvars.ContextVar[Optional[str]] = contextvars.ContextVar(
    "scene", default=None
)
step_var: contextvars.ContextVar[Optional[int]] = contextvars.ContextVar(
    "step", default=None
)


class StructuredFormatter(logging.Formatter):
    """Formats log records as one JSON object per line"""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "severity": record.levelname,
            "message": record.getMessage(),
            "logger": record.name,
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        if record.exc_info:
            log_entry["exception"] = self.formatException(record.exc_info)

        if hasattr(record, "extra_fields"):
            log_entry.update(record.extra_fields)

        for key in ("run_id", "scene", "step"):
            value = getattr(record, key, None)
            if value is not None:
                log_entry[key] = value

        return json.dumps(log_entry, default=str)


class RunContextFilter(logging.Filter):
    """Adds the current run context to every record"""

    def filter(self, record: logging.LogRecord) -> bool:
        record.run_id = run_id_var.get()
        record.scene = scene_var.get()
        record.step = step_var.get()
        return True


def setup_logging(log_level: str = "INFO", stream=None) -> None:
    """Setup application logging configuration"""
    numeric_level = getattr(logging, log_level.upper(), logging.INFO)

    console_handler = logging.StreamHandler(stream or sys.stderr)
    console_handler.setFormatter(StructuredFormatter())
    console_handler.addFilter(RunContextFilter())

    root_logger = logging.getLogger()
    root_logger.setLevel(numeric_level)
    root_logger.handlers.clear()
    root_logger.addHandler(console_handler)

    # Quiet third-party loggers
    for logger_name in ("PIL", "matplotlib", "numba"):
        logging.getLogger(logger_name).setLevel(logging.WARNING)

    logging.getLogger("roadsplat").setLevel(numeric_level)


class LoggerAdapter(logging.LoggerAdapter):
    """Logger adapter carrying structured fields"""

    def __init__(self, logger: logging.Logger, extra_fields: Dict[str, Any] = None):
        self.extra_fields = extra_fields or {}
        super().__init__(logger, {})

    def process(self, msg: str, kwargs: Dict[str, Any]) -> tuple:
        extra = dict(self.extra_fields)
        extra.update(kwargs.get("extra", {}))
        kwargs["extra"] = {"extra_fields": extra}
        return msg, kwargs

    def with_fields(self, **fields) -> "LoggerAdapter":
        """Create new adapter with additional fields"""
        new_fields = self.extra_fields.copy()
        new_fields.update(fields)
        return LoggerAdapter(self.logger, new_fields)


def get_logger(name: str, **extra_fields) -> LoggerAdapter:
    """Get structured logger with optional extra fields"""
    return LoggerAdapter(logging.getLogger(name), extra_fields)


def log_performance(logger: LoggerAdapter):
    """Decorator to log function duration and outcome"""

    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                result = func(*args, **kwargs)
            except Exception as e:
                logger.error(
                    f"{func.__name__} failed",
                    extra={
                        "operation": func.__name__,
                        "duration_seconds": round(time.perf_counter() - start_time, 3),
                        "status": "error",
                        "error": str(e),
                    },
                )
                raise

            logger.info(
                f"{func.__name__} completed",
                extra={
                    "operation": func.__name__,
                    "duration_seconds": round(time.perf_counter() - start_time, 3),
                    "status": "success",
                },
            )
            return result

        return wrapper

    return decorator
