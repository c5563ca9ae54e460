"""
Data validation module for the Corona Stereo Pipeline.
Validates configuration sections, camera records and observation records.
"""

import logging
import math
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from .errors import ConfigError

logger = logging.getLogger(__name__)


class ValidationError(ConfigError):
    """Custom exception for validation errors."""
    pass


def validate_known_keys(section: str, data: Mapping[str, Any], allowed: Iterable[str]) -> None:
    """
    Reject keys that the schema does not know about.

    Args:
        section: Section name for error reporting
        data: Parsed mapping
        allowed: Permitted key names

    Raises:
        ValidationError: If an unknown key is present
    """
    if not isinstance(data, Mapping):
        raise ValidationError(f"Section '{section}' must be a table, got {type(data).__name__}")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValidationError(
            f"Unknown key(s) in '{section}': {', '.join(unknown)}. "
            f"Allowed: {', '.join(sorted(allowed))}"
        )


def validate_number(name: str, value: Any, allow_int: bool = True) -> float:
    """Check that value is a finite real number (bools rejected)."""
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"'{name}' must be a number, got {type(value).__name__}")
    if not math.isfinite(value):
        raise ValidationError(f"'{name}' must be finite, got {value}")
    if not allow_int and isinstance(value, int):
        return float(value)
    return value


def validate_positive(name: str, value: Any) -> float:
    value = validate_number(name, value)
    if value <= 0:
        raise ValidationError(f"'{name}' must be positive, got {value}")
    return value


def validate_integer(name: str, value: Any, minimum: Optional[int] = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"'{name}' must be an integer, got {type(value).__name__}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"'{name}' must be >= {minimum}, got {value}")
    return value


def validate_range(name: str, value: Any, low: float, high: float) -> float:
    """Check low <= value <= high."""
    value = validate_number(name, value)
    if not (low <= value <= high):
        raise ValidationError(f"'{name}' must be in [{low}, {high}], got {value}")
    return value


def validate_choice(name: str, value: Any, choices: Sequence[str]) -> str:
    if value not in choices:
        raise ValidationError(
            f"Invalid {name} '{value}'. Must be one of: {', '.join(choices)}"
        )
    return value


def validate_bool(name: str, value: Any) -> bool:
    if not isinstance(value, bool):
        raise ValidationError(f"'{name}' must be boolean, got {type(value).__name__}")
    return value


def validate_string(name: str, value: Any) -> str:
    if not isinstance(value, str) or not value.strip():
        raise ValidationError(f"'{name}' must be a non-empty string")
    return value


def validate_camera_record(record: Dict[str, Any], source: str = "<camera>") -> None:
    """
    Validate a camera JSON record before it is turned into a PanoramicCamera.

    Args:
        record: Decoded JSON object
        source: File name for error reporting

    Raises:
        ValidationError: If a field is missing or out of range
    """
    required = ["f_mm", "film_half_length_mm", "film_half_width_mm", "parameters"]
    for key in required:
        if key not in record:
            raise ValidationError(f"{source}: missing required field '{key}'")

    validate_positive(f"{source}.f_mm", record["f_mm"])
    validate_positive(f"{source}.film_half_length_mm", record["film_half_length_mm"])
    validate_positive(f"{source}.film_half_width_mm", record["film_half_width_mm"])

    half_angle = record["film_half_length_mm"] / record["f_mm"]
    if half_angle > math.radians(35.5):
        raise ValidationError(
            f"{source}: film half-length {record['film_half_length_mm']} mm exceeds the "
            f"35.5 deg half field of view at f={record['f_mm']} mm"
        )

    params = record["parameters"]
    if not isinstance(params, dict):
        raise ValidationError(f"{source}: 'parameters' must be an object")
    from .camera import PARAMETER_NAMES
    missing = [p for p in PARAMETER_NAMES if p not in params]
    if missing:
        raise ValidationError(f"{source}: missing camera parameters: {', '.join(missing)}")
    unknown = sorted(set(params) - set(PARAMETER_NAMES))
    if unknown:
        raise ValidationError(f"{source}: unknown camera parameters: {', '.join(unknown)}")
    for name in PARAMETER_NAMES:
        validate_number(f"{source}.parameters.{name}", params[name])

    if "pitch_um" in record:
        validate_positive(f"{source}.pitch_um", record["pitch_um"])


def validate_observation_row(row: Dict[str, str], line_num: int) -> None:
    """
    Validate one row of the GCP/tie-point CSV.

    Raises:
        ValidationError: If the row is malformed
    """
    if not row.get("image_id", "").strip():
        raise ValidationError(f"Line {line_num}: empty image_id")
    for key in ("col", "row"):
        try:
            float(row[key])
        except (KeyError, TypeError, ValueError):
            raise ValidationError(f"Line {line_num}: '{key}' must be a number, got {row.get(key)!r}")
    role = (row.get("role") or "").strip()
    if role not in ("control", "check", "tie"):
        raise ValidationError(f"Line {line_num}: invalid role '{role}' (control, check or tie)")
    if role != "tie":
        for key in ("lon", "lat", "h"):
            try:
                float(row[key])
            except (KeyError, TypeError, ValueError):
                raise ValidationError(f"Line {line_num}: GCP needs numeric '{key}'")
    elif not (row.get("tie_id") or "").strip():
        raise ValidationError(f"Line {line_num}: tie point row without tie_id")
    sigma = row.get("sigma_px")
    if sigma not in (None, ""):
        try:
            if float(sigma) <= 0:
                raise ValueError
        except ValueError:
            raise ValidationError(f"Line {line_num}: sigma_px must be positive, got {sigma!r}")


def validate_image_ids(declared: List[str], used: Iterable[str], context: str) -> None:
    """Every referenced image id must be declared."""
    unknown = sorted(set(used) - set(declared))
    if unknown:
        raise ValidationError(
            f"{context}: unknown image id(s): {', '.join(unknown)}. "
            f"Declared: {', '.join(declared)}"
        )
    logger.debug(f"{context}: validated image ids")
