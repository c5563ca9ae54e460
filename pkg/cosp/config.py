"""
Pipeline configuration: a frozen dataclass tree parsed strictly from TOML or JSON.

Every section is a flat table. Unknown sections and keys are rejected, value
types are checked against the field defaults, and keys ending in ``_deg`` are
converted to radians once at parse time (the field drops the suffix).
"""
import json
import logging
import math

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import MISSING, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

from .errors import MissingInput
from .validation import (
    ValidationError,
    validate_bool,
    validate_choice,
    validate_integer,
    validate_known_keys,
    validate_number,
    validate_positive,
    validate_range,
    validate_string,
)

logger = logging.getLogger(__name__)

DEG = {"unit": "deg"}


@dataclass(frozen=True)
class RunOptions:
    seed: int = 42
    jobs: int = 1
    utm_zone: Optional[int] = None
    utm_north: bool = True
    synthetic: bool = False


@dataclass(frozen=True)
class PathsConfig:
    """Stage inputs. Relative paths resolve against the config file's directory."""
    run_dir: str = "runs/synthetic"
    scans_dir: Optional[str] = None
    observations: Optional[str] = None
    matches: Optional[str] = None
    reference_dem: Optional[str] = None
    reference_image: Optional[str] = None
    stable_mask: Optional[str] = None
    truth_dem: Optional[str] = None
    footprints: Optional[str] = None


@dataclass(frozen=True)
class ImageSpec:
    """One film strip of the run."""
    id: str
    look: str = "fore"
    scan: Optional[str] = None
    footprint: Tuple[Tuple[float, float], ...] = ()
    uncertainty_km: float = 10.0


@dataclass(frozen=True)
class CameraConstants:
    f_mm: float = 609.6
    pitch_um: float = 7.0
    film_half_length_mm: float = 372.5
    film_half_width_mm: float = 28.0


@dataclass(frozen=True)
class FilmprepOptions:
    bending_correction: bool = True
    bending_ab: bool = False
    median_window: int = 501
    gaussian_sigma: float = 2.0
    clip_m: float = 0.015
    max_trace_gap: int = 2000
    stitch_window: int = 64
    scan_overlap_px: int = 1000
    align: bool = True


@dataclass(frozen=True)
class GcpOptions:
    confidence_threshold: float = 0.5
    max_per_tile: int = 200
    tile_width: int = 1920
    tile_height: int = 1440
    coarse_width: int = 10600
    coarse_height: int = 8000
    fine_overlap: float = 0.1
    check_fraction: float = 0.5
    mock_matcher: bool = True
    mock_grid: int = 6
    mock_patch: int = 31
    mock_search: int = 24
    sigma_px: float = 1.0


@dataclass(frozen=True)
class AdjustOptions:
    max_iterations: int = 100
    sse_tolerance: float = 1e-10
    step_tolerance: float = 1e-8
    outlier_sigma: float = 3.0
    reweight_rounds: int = 3
    min_control_per_camera: int = 6
    joint: bool = False
    fixed_parameters: Tuple[str, ...] = ()
    residual_grid_step: float = 50.0
    residual_cutoff: float = 300.0


@dataclass(frozen=True)
class StereoOptions:
    grid_size: int = 25
    height_levels: int = 5
    degree: int = 4
    height_min: Optional[float] = None
    height_max: Optional[float] = None
    condition_limit: float = 1e12
    census_window: int = 7
    p1: float = 10.0
    p2: float = 120.0
    paths: int = 8
    disparity_margin: int = 6
    lr_tolerance: float = 1.0
    tile_size: int = 512
    yparallax_step: int = 50
    yparallax_patch: int = 15
    yparallax_search: int = 4


@dataclass(frozen=True)
class SurfaceOptions:
    cell_size: float = 10.0
    tile_size_m: float = 20000.0
    tile_overlap: float = 0.25
    lsm_iterations: int = 10
    lsm_tolerance: float = 1e-4
    dh_limit: float = 100.0
    slope_limit: float = field(default=math.radians(45.0), metadata=DEG)
    min_stable_fraction: float = 0.2
    quality_factor: float = 3.0
    point_stride: int = 1
    fill_gaps: bool = False
    write_points: bool = False
    band_width: float = 50.0


@dataclass(frozen=True)
class SynthOptions:
    center_lon: float = 96.24
    center_lat: float = 44.59
    altitude_m: float = 170000.0
    stereo_angle: float = field(default=math.radians(30.0), metadata=DEG)
    width: int = 2000
    height: int = 1500
    pitch_um: float = 7.0
    full_extent: bool = False
    base_height_m: float = 1500.0
    relief_m: float = 120.0
    hills: int = 6
    texture_scale_m: float = 12.0
    noise_px: float = 0.0
    gcps: int = 40
    ties: int = 40
    bending_amplitude_px: float = 0.0
    bending_period_px: float = 4000.0
    reference_cell_m: float = 10.0
    reference_offset_m: Tuple[float, ...] = ()
    truth_rates: bool = True
    footprint_offset_m: Tuple[float, ...] = (200.0, -150.0)
    footprint_uncertainty_km: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    run: RunOptions = field(default_factory=RunOptions)
    paths: PathsConfig = field(default_factory=PathsConfig)
    camera: CameraConstants = field(default_factory=CameraConstants)
    images: Tuple[ImageSpec, ...] = ()
    filmprep: FilmprepOptions = field(default_factory=FilmprepOptions)
    gcp: GcpOptions = field(default_factory=GcpOptions)
    adjust: AdjustOptions = field(default_factory=AdjustOptions)
    stereo: StereoOptions = field(default_factory=StereoOptions)
    surface: SurfaceOptions = field(default_factory=SurfaceOptions)
    synth: SynthOptions = field(default_factory=SynthOptions)
    source: Optional[str] = None

    @property
    def run_dir(self) -> Path:
        return Path(self.paths.run_dir)


SECTIONS = {
    "run": RunOptions,
    "paths": PathsConfig,
    "camera": CameraConstants,
    "filmprep": FilmprepOptions,
    "gcp": GcpOptions,
    "adjust": AdjustOptions,
    "stereo": StereoOptions,
    "surface": SurfaceOptions,
    "synth": SynthOptions,
}

# Range checks beyond the type check, keyed by (section, field)
_RANGES = {
    ("gcp", "confidence_threshold"): (0.0, 1.0),
    ("gcp", "fine_overlap"): (0.0, 0.9),
    ("gcp", "check_fraction"): (0.0, 1.0),
    ("surface", "tile_overlap"): (0.0, 0.9),
    ("surface", "min_stable_fraction"): (0.0, 1.0),
    ("synth", "center_lat"): (-80.0, 84.0),
    ("synth", "center_lon"): (-180.0, 180.0),
}
_POSITIVE = {
    "f_mm", "pitch_um", "film_half_length_mm", "film_half_width_mm", "gaussian_sigma", "clip_m",
    "cell_size", "tile_size_m", "altitude_m", "texture_scale_m", "reference_cell_m",
    "residual_grid_step", "residual_cutoff", "p1", "p2", "condition_limit", "band_width", "sigma_px",
}


def _config_key(f) -> str:
    return f"{f.name}_deg" if f.metadata.get("unit") == "deg" else f.name


def _default_of(f) -> Any:
    if f.default is not MISSING:
        return f.default
    if f.default_factory is not MISSING:  # type: ignore[misc]
        return f.default_factory()  # type: ignore[misc]
    return None


def _coerce(section: str, f, value: Any) -> Any:
    name = f"{section}.{_config_key(f)}"
    default = _default_of(f)
    annotation = str(f.type)
    if f.metadata.get("unit") == "deg":
        return math.radians(validate_number(name, value))
    if isinstance(default, bool):
        return validate_bool(name, value)
    if "Tuple" in annotation or isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ValidationError(f"'{name}' must be a list, got {type(value).__name__}")
        if "str" in annotation:
            return tuple(validate_string(f"{name}[{i}]", v) for i, v in enumerate(value))
        return tuple(float(validate_number(f"{name}[{i}]", v)) for i, v in enumerate(value))
    if "int" in annotation and "float" not in annotation:
        minimum = 1 if f.name in ("jobs", "max_iterations", "median_window", "width", "height") else 0
        return validate_integer(name, value, minimum)
    if "float" in annotation:
        number = float(validate_number(name, value))
        if f.name in _POSITIVE:
            validate_positive(name, number)
        return number
    if "str" in annotation:
        return validate_string(name, value)
    return value


def _parse_section(section: str, cls, data: Mapping[str, Any]):
    field_map = {_config_key(f): f for f in fields(cls)}
    validate_known_keys(section, data, field_map)
    kwargs = {}
    for key, value in data.items():
        f = field_map[key]
        kwargs[f.name] = _coerce(section, f, value)
        low_high = _RANGES.get((section, f.name))
        if low_high is not None:
            validate_range(f"{section}.{key}", kwargs[f.name], *low_high)
    return cls(**kwargs)


def _parse_images(data: Any) -> Tuple[ImageSpec, ...]:
    if not isinstance(data, list):
        raise ValidationError(f"'images' must be a list of tables, got {type(data).__name__}")
    allowed = [f.name for f in fields(ImageSpec)]
    images = []
    for i, record in enumerate(data):
        section = f"images[{i}]"
        validate_known_keys(section, record, allowed)
        if "id" not in record:
            raise ValidationError(f"'{section}' is missing 'id'")
        footprint = record.get("footprint", [])
        if footprint and (len(footprint) != 4 or any(len(c) != 2 for c in footprint)):
            raise ValidationError(f"'{section}.footprint' must list 4 [lon, lat] corners")
        images.append(ImageSpec(
            id=validate_string(f"{section}.id", record["id"]),
            look=validate_choice(f"{section}.look", record.get("look", "fore"), ("fore", "aft")),
            scan=validate_string(f"{section}.scan", record["scan"]) if "scan" in record else None,
            footprint=tuple((float(validate_number(f"{section}.footprint", lon)),
                             float(validate_number(f"{section}.footprint", lat))) for lon, lat in footprint),
            uncertainty_km=float(validate_positive(f"{section}.uncertainty_km", record.get("uncertainty_km", 10.0))),
        ))
    ids = [img.id for img in images]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"Duplicate image ids: {ids}")
    return tuple(images)


def parse_config(data: Mapping[str, Any], base_dir: Optional[Path] = None, source: Optional[str] = None) -> PipelineConfig:
    """
    Build a PipelineConfig from a parsed mapping.

    Raises:
        ValidationError: On unknown sections/keys, wrong types or out-of-range values
    """
    validate_known_keys("<root>", data, list(SECTIONS) + ["images"])
    kwargs: Dict[str, Any] = {}
    for section, cls in SECTIONS.items():
        if section in data:
            kwargs[section] = _parse_section(section, cls, data[section])
    if "images" in data:
        kwargs["images"] = _parse_images(data["images"])

    config = PipelineConfig(source=source, **kwargs)
    if config.adjust.fixed_parameters:
        from .camera import PARAMETER_NAMES
        unknown = sorted(set(config.adjust.fixed_parameters) - set(PARAMETER_NAMES))
        if unknown:
            raise ValidationError(f"adjust.fixed_parameters: unknown parameter(s) {', '.join(unknown)}")
    if config.stereo.degree < 1:
        raise ValidationError("stereo.degree must be at least 1")
    if config.stereo.census_window % 2 == 0:
        raise ValidationError("stereo.census_window must be odd")
    if config.stereo.paths not in (4, 8):
        raise ValidationError("stereo.paths must be 4 or 8")
    if config.run.utm_zone is not None and not 1 <= config.run.utm_zone <= 60:
        raise ValidationError(f"run.utm_zone must be 1..60, got {config.run.utm_zone}")
    if base_dir is not None:
        config = replace(config, paths=_resolve_paths(config.paths, base_dir))
    return config


def _resolve_paths(paths: PathsConfig, base_dir: Path) -> PathsConfig:
    resolved = {}
    for f in fields(paths):
        value = getattr(paths, f.name)
        if value is not None and not Path(value).is_absolute():
            value = str(base_dir / value)
        resolved[f.name] = value
    return PathsConfig(**resolved)


def load_config(filepath: Union[str, Path]) -> PipelineConfig:
    """
    Load a TOML (.toml) or JSON (.json) configuration file.

    Raises:
        MissingInput: If the file does not exist
        ValidationError: If the file cannot be parsed or fails validation
    """
    filepath = Path(filepath)
    if not filepath.exists():
        logger.error(f"Config file '{filepath}' not found")
        raise MissingInput(f"Missing config file: {filepath}")
    try:
        if filepath.suffix.lower() == ".json":
            with open(filepath, "r", encoding="utf-8") as f:
                data = json.load(f)
        else:
            with open(filepath, "rb") as f:
                data = tomllib.load(f)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        logger.error(f"Invalid config file '{filepath}': {e}")
        raise ValidationError(f"Invalid config file '{filepath}': {e}") from e
    config = parse_config(data, base_dir=filepath.parent.resolve(), source=str(filepath))
    logger.info(f"Loaded config from '{filepath}'")
    return config


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    """Plain mapping of a config (angles back in degrees), for provenance."""
    out: Dict[str, Any] = {}
    for section, cls in SECTIONS.items():
        obj = getattr(config, section)
        entry = {}
        for f in fields(cls):
            value = getattr(obj, f.name)
            if f.metadata.get("unit") == "deg":
                value = math.degrees(value)
            if isinstance(value, tuple):
                value = list(value)
            entry[_config_key(f)] = value
        out[section] = entry
    out["images"] = [
        {
            "id": img.id,
            "look": img.look,
            "scan": img.scan,
            "footprint": [list(c) for c in img.footprint],
            "uncertainty_km": img.uncertainty_km,
        }
        for img in config.images
    ]
    return out
