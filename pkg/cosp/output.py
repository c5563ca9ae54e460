"""Output writers for stage artifacts (CSV, JSON, terminal display)."""
import csv
import json
import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Mapping, Sequence, Union

import numpy as np

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _plain(value: Any) -> Any:
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to null."""
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        value = value.item()
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, Path):
        return str(value)
    return value


def write_csv(rows: Sequence[Mapping[str, Any]], fieldnames: Sequence[str], filepath: PathLike) -> None:
    """Write rows to a CSV file with a fixed header."""
    filepath = Path(filepath)
    try:
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(filepath, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: _format_cell(row.get(k)) for k in fieldnames})
        logger.info(f"Wrote {len(rows)} rows to '{filepath}'")
    except Exception as e:
        logger.error(f"Error writing CSV to '{filepath}': {e}")
        raise


def _format_cell(value: Any) -> Any:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return "" if not math.isfinite(float(value)) else f"{float(value):.6g}"
    return value


def write_json(obj: Any, filepath: PathLike) -> None:
    """Write a JSON document with sorted keys."""
    filepath = Path(filepath)
    try:
        filepath.parent.mkdir(parents=True, exist_ok=True)
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(_plain(obj), f, indent=2, sort_keys=True)
        logger.debug(f"Wrote JSON to '{filepath}'")
    except Exception as e:
        logger.error(f"Error writing JSON to '{filepath}': {e}")
        raise


def read_json(filepath: PathLike) -> Dict[str, Any]:
    with open(filepath, "r", encoding="utf-8") as f:
        return json.load(f)


def print_summary(lines: List[str], title: str = "COSP RUN SUMMARY") -> None:
    """Print a summary block to the terminal."""
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60 + "\n")
