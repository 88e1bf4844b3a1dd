"""
Utility Functions for SoLA Desk
JSON / JSON-lines persistence, numpy conversion, logging setup and small statistics.
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

import numpy as np

from .errors import ArtifactError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def convert_numpy_types(obj: Any) -> Any:
    """
    Convert numpy types to Python native types for JSON serialization.

    Args:
        obj: Any Python object that may contain numpy types

    Returns:
        Object with numpy types converted to Python native types
    """
    if isinstance(obj, dict):
        return {str(k): convert_numpy_types(v) for k, v in obj.items()}
    elif isinstance(obj, (list, tuple)):
        return [convert_numpy_types(item) for item in obj]
    elif isinstance(obj, np.ndarray):
        return obj.tolist()
    elif isinstance(obj, np.bool_):
        return bool(obj)
    elif isinstance(obj, np.generic):
        return obj.item()
    elif isinstance(obj, Path):
        return str(obj)
    return obj


class CustomJSONEncoder(json.JSONEncoder):
    """JSON encoder for numpy values and paths."""

    def default(self, obj):
        if isinstance(obj, Path):
            return str(obj)
        elif isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.generic):
            return obj.item()
        return super().default(obj)


def save_json(data: Any, filename: PathLike, indent: int = 2) -> Path:
    """
    Write ``data`` as UTF-8 JSON with sorted keys.

    No timestamp or other run metadata is added, so identical inputs give
    byte-identical files.
    """
    filepath = Path(filename)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(convert_numpy_types(data), f, indent=indent, sort_keys=True,
                  ensure_ascii=False, cls=CustomJSONEncoder)
        f.write('\n')
    logger.debug(f"💾 Saved {filepath}")
    return filepath


def load_json(filename: PathLike) -> Any:
    """
    Load a JSON artifact.

    Raises:
        ArtifactError: If the file is missing or is not valid JSON
    """
    filepath = Path(filename)
    if not filepath.is_file():
        raise ArtifactError(filepath)
    try:
        with open(filepath, 'r', encoding='utf-8') as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ArtifactError(filepath, f"Invalid JSON in {filepath}: {e}") from e


def write_jsonl(rows: Iterable[Any], filename: PathLike) -> Path:
    """Write one sorted-key JSON object per line."""
    filepath = Path(filename)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(convert_numpy_types(row), sort_keys=True, ensure_ascii=False))
            f.write('\n')
    logger.debug(f"💾 Saved {filepath}")
    return filepath


def read_jsonl(filename: PathLike) -> List[Any]:
    """
    Read a JSON-lines artifact, skipping blank lines.

    Raises:
        ArtifactError: If the file is missing or a line is not valid JSON
    """
    filepath = Path(filename)
    if not filepath.is_file():
        raise ArtifactError(filepath)
    rows = []
    with open(filepath, 'r', encoding='utf-8') as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ArtifactError(filepath, f"Invalid JSON on line {lineno} of {filepath}: {e}") from e
    return rows


def require_artifact(filepath: PathLike) -> Path:
    """Return the path if it exists, else raise ArtifactError naming it."""
    path = Path(filepath)
    if not path.exists():
        raise ArtifactError(path)
    return path


def calculate_statistics(values: List[float]) -> Dict[str, float]:
    """Mean, median, min, max, std and count of a list of values (empty dict if none)."""
    if not values:
        return {}
    arr = np.asarray(values, dtype=np.float64)
    return {
        'mean': float(np.mean(arr)),
        'median': float(np.median(arr)),
        'min': float(np.min(arr)),
        'max': float(np.max(arr)),
        'std': float(np.std(arr)),
        'count': int(arr.size),
    }


def setup_logging(log_file: PathLike = None, level: str = 'INFO', console: bool = True) -> None:
    """
    Set up logging configuration for the application.

    Args:
        log_file: Path to log file (None for console only)
        level: Logging level
        console: Whether to log to console
    """
    log_level = getattr(logging, level.upper(), logging.INFO)
    handlers: List[logging.Handler] = []

    if console:
        console_handler = logging.StreamHandler()
        console_handler.setLevel(log_level)
        handlers.append(console_handler)

    if log_file is not None:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        file_handler = logging.FileHandler(log_file, encoding='utf-8')
        file_handler.setLevel(log_level)
        handlers.append(file_handler)

    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    logger.info(f"✅ Logging configured. Level: {level}, File: {log_file}")
