import json
import logging
import os
import time
from contextlib import contextmanager
from datetime import datetime
from typing import Iterator, Optional

from app.core.config import settings

# Configure logging
LOG_LEVEL = settings.LOG_LEVEL.upper()
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DIR = settings.LOG_DIR

# Create logger
logger = logging.getLogger("ivs-risk")
logger.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))

# Create console handler
console_handler = logging.StreamHandler()
console_handler.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))
console_handler.setFormatter(logging.Formatter(LOG_FORMAT))
logger.addHandler(console_handler)

stage_logger = logging.getLogger("ivs-risk-stages")
stage_logger.setLevel(logging.INFO)
stage_logger.propagate = False

if settings.LOG_TO_FILE:
    # Ensure log directory exists
    os.makedirs(LOG_DIR, exist_ok=True)

    # General log
    file_handler = logging.FileHandler(os.path.join(LOG_DIR, "engine.log"))
    file_handler.setLevel(getattr(logging, LOG_LEVEL, logging.INFO))
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(file_handler)

    # Error log
    error_handler = logging.FileHandler(os.path.join(LOG_DIR, "errors.log"))
    error_handler.setLevel(logging.ERROR)
    error_handler.setFormatter(logging.Formatter(LOG_FORMAT))
    logger.addHandler(error_handler)

    # One JSON object per pipeline stage
    stage_handler = logging.FileHandler(os.path.join(LOG_DIR, "stages.log"))
    stage_handler.setLevel(logging.INFO)
    stage_handler.setFormatter(logging.Formatter("%(message)s"))
    stage_logger.addHandler(stage_handler)


def set_level(level: str) -> None:
    """Change the level of the engine logger and its console handler."""
    numeric = getattr(logging, level.upper(), None)
    if numeric is None:
        raise ValueError(f"Unknown log level: {level}")
    logger.setLevel(numeric)
    console_handler.setLevel(numeric)


def _log_stage(
    stage: str,
    run_id: str,
    duration: float,
    status: str,
    error: Optional[str],
) -> None:
    """Log a stage record as JSON for later analysis."""
    entry = {
        "stage": stage,
        "run_id": run_id,
        "timestamp": datetime.now().isoformat(),
        "duration_s": round(duration, 6),
        "status": status,
        "error": error,
    }
    stage_logger.info(json.dumps(entry))


@contextmanager
def stage_logging(stage: str, run_id: Optional[str] = None) -> Iterator[str]:
    """
    Time a pipeline stage and record its outcome.

    Args:
        stage: Stage name (e.g. "compare", "simulate")
        run_id: Identifier shared by all stages of one run

    Yields:
        The run id in use
    """
    run_id = run_id or f"{int(time.time())}-{os.urandom(4).hex()}"
    start_time = time.time()
    logger.info(f"Stage {stage} started ({run_id})")
    try:
        yield run_id
    except Exception as e:
        duration = time.time() - start_time
        logger.error(f"Stage {stage} failed after {duration:.3f}s: {e}", exc_info=True)
        _log_stage(stage, run_id, duration, "error", str(e))
        raise
    duration = time.time() - start_time
    logger.info(f"Stage {stage} finished in {duration:.3f}s")
    _log_stage(stage, run_id, duration, "ok", None)


def get_logger(name: str) -> logging.Logger:
    """Get a logger with the given name."""
    return logging.getLogger(f"ivs-risk.{name}")
