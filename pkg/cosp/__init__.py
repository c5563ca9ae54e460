"""
Corona Stereo Pipeline Package

Photogrammetric processing of declassified Corona KH-4 panoramic stereo film:
film preparation, GCP generation, panoramic bundle adjustment, epipolar
rectification, dense matching, DEM gridding and coregistration.
"""

__version__ = "0.4.0"

from .errors import (
    CospError,
    ConfigError,
    DataError,
    NumericalError,
    error_payload,
    exit_code_for,
)
from .models import (
    AdjustmentReport,
    Affine3D,
    DhReport,
    EcefPoint,
    FootprintEstimate,
    GcpRecord,
    GeodeticPoint,
    ImagePointMM,
    MatchSet,
    PixelPoint,
    TiePoint,
    TileSpec,
)
from .geodesy import ecef_to_geodetic, geodetic_to_ecef, nmad
from .raster import RasterGrid, read_raster, write_raster
from .camera import PanoramicCamera, backproject_ray, project
from .adjustment import bundle_adjust, initialize_cameras
from .filmprep import correct_bending, prepare_film, stitch, trace_stripes
from .gcpgen import assemble_gcps, plan_tiles, refine_footprint
from .rectify import RectificationModel, build_rectification, resample_rectified
from .matching import DisparityMap, sgm_match
from .surface import coregister_tiles, dh_stats, grid_dem, triangulate
from .synth import make_stereo_scene, render_observations
from .config import PipelineConfig, load_config
from .pipeline import STAGES, run_all, run_stage
from .report import build_report

__all__ = [
    "__version__",
    # Errors
    "CospError",
    "ConfigError",
    "DataError",
    "NumericalError",
    "error_payload",
    "exit_code_for",
    # Models
    "AdjustmentReport",
    "Affine3D",
    "DhReport",
    "EcefPoint",
    "FootprintEstimate",
    "GcpRecord",
    "GeodeticPoint",
    "ImagePointMM",
    "MatchSet",
    "PixelPoint",
    "TiePoint",
    "TileSpec",
    # Geodesy and rasters
    "ecef_to_geodetic",
    "geodetic_to_ecef",
    "nmad",
    "RasterGrid",
    "read_raster",
    "write_raster",
    # Camera and adjustment
    "PanoramicCamera",
    "project",
    "backproject_ray",
    "bundle_adjust",
    "initialize_cameras",
    # Film preparation
    "stitch",
    "trace_stripes",
    "correct_bending",
    "prepare_film",
    # GCP generation
    "plan_tiles",
    "refine_footprint",
    "assemble_gcps",
    # Stereo
    "RectificationModel",
    "build_rectification",
    "resample_rectified",
    "DisparityMap",
    "sgm_match",
    # Surface
    "triangulate",
    "grid_dem",
    "dh_stats",
    "coregister_tiles",
    # Synthetic data
    "make_stereo_scene",
    "render_observations",
    # Pipeline
    "PipelineConfig",
    "load_config",
    "STAGES",
    "run_stage",
    "run_all",
    "build_report",
]
