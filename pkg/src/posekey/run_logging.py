"""Structured JSON run logging.

Every CLI command and every ``log_every``-th training step is logged as one
JSON line on the ``posekey.runs`` logger, capturing the command name,
parameters, status and elapsed time.
"""

import json
import logging
import os
import time
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any

logger = logging.getLogger("posekey.runs")

MAX_PARAM_CHARS = 200


@contextmanager
def logged_command(command: str, params: dict[str, Any]) -> Iterator[None]:
    """Log ``command`` as ok/error with its duration; exceptions are re-raised."""
    start = time.perf_counter()
    try:
        yield
    except BaseException as exc:
        elapsed_ms = (time.perf_counter() - start) * 1000
        logger.error(
            json.dumps({
                "event": "command",
                "command": command,
                "params": _sanitize_params(params),
                "status": "error",
                "error": (str(exc) or type(exc).__name__)[:MAX_PARAM_CHARS],
                "duration_ms": round(elapsed_ms, 1),
            }),
        )
        raise
    elapsed_ms = (time.perf_counter() - start) * 1000
    logger.info(
        json.dumps({
            "event": "command",
            "command": command,
            "params": _sanitize_params(params),
            "status": "ok",
            "duration_ms": round(elapsed_ms, 1),
        }),
    )


def log_event(event: str, **fields: Any) -> None:
    logger.info(json.dumps({"event": event, **_sanitize_params(fields)}))


def _sanitize_params(params: dict[str, Any]) -> dict[str, Any]:
    """Make values JSON-safe and truncate long strings."""
    sanitized = {}
    for k, v in params.items():
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, tuple):
            v = list(v)
        elif isinstance(v, float):
            v = round(v, 6) if v == v and abs(v) != float("inf") else str(v)
        elif not isinstance(v, (str, int, bool, list, dict, type(None))):
            v = repr(v)
        if isinstance(v, str) and len(v) > MAX_PARAM_CHARS:
            v = v[:MAX_PARAM_CHARS] + "..."
        sanitized[k] = v
    return sanitized


def configure_logging(level: str | None = None) -> None:
    """Send ``posekey`` logs to the console at ``level`` (default ``$POSEKEY_LOG_LEVEL``)."""
    name = (level or os.environ.get("POSEKEY_LOG_LEVEL", "INFO")).upper()
    if name not in logging.getLevelNamesMapping():
        raise ValueError(f"POSEKEY_LOG_LEVEL must be a logging level name, got '{name}'")
    root = logging.getLogger("posekey")
    root.setLevel(name)
    if not root.handlers:
        root.addHandler(logging.StreamHandler())
