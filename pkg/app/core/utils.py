import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Union

import numpy as np


def stable_mean(values: Union[np.ndarray, Iterable[float]]) -> float:
    """
    Mean computed with compensated summation.

    Args:
        values: Finite numbers, at least one

    Returns:
        The arithmetic mean
    """
    arr = np.asarray(values, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("mean of an empty sequence")
    return math.fsum(arr.tolist()) / arr.size


def standard_error(values: Union[np.ndarray, Iterable[float]]) -> float:
    """
    Standard error of the mean: sample standard deviation (ddof=1) over sqrt(n).

    Returns 0 for a single value.
    """
    arr = np.asarray(values, dtype=float).ravel()
    n = arr.size
    if n == 0:
        raise ValueError("standard error of an empty sequence")
    if n == 1:
        return 0.0
    mean = stable_mean(arr)
    var = math.fsum(((arr - mean) ** 2).tolist()) / (n - 1)
    return math.sqrt(var) / math.sqrt(n)


def _to_jsonable(obj: Any) -> Any:
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if hasattr(obj, "model_dump"):
        return obj.model_dump(mode="json")
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def dump_json(obj: Any) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True, default=_to_jsonable) + "\n"


def ensure_dir(path: Union[str, Path]) -> Path:
    """Create a directory (and parents) if missing."""
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path


def write_json(path: Union[str, Path], obj: Any) -> Path:
    """Write canonical JSON to a file, creating the parent directory."""
    path = Path(path)
    ensure_dir(path.parent)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dump_json(obj))
    return path


def read_json(path: Union[str, Path]) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
