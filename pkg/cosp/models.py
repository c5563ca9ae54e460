"""Data models shared across the pipeline stages."""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np


@dataclass(frozen=True)
class GeodeticPoint:
    """WGS84 geodetic position: degrees, degrees, meters above the ellipsoid."""
    lon: float
    lat: float
    h: float = 0.0

    def __post_init__(self):
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"Latitude out of range: {self.lat}")
        lon = ((self.lon + 180.0) % 360.0) - 180.0
        if lon == -180.0:
            lon = 180.0
        object.__setattr__(self, "lon", lon)


@dataclass(frozen=True)
class EcefPoint:
    """Earth-centered Earth-fixed Cartesian position in meters."""
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    @classmethod
    def from_array(cls, xyz: Sequence[float]) -> "EcefPoint":
        return cls(float(xyz[0]), float(xyz[1]), float(xyz[2]))


@dataclass(frozen=True)
class PixelPoint:
    """Position in the scanned, bending-corrected image (pixels)."""
    col: float
    row: float


@dataclass(frozen=True)
class ImagePointMM:
    """Panoramic photo coordinates in mm, origin at format center."""
    x_p: float
    y_p: float


@dataclass(frozen=True)
class GcpRecord:
    """Image observation bound to a known ground coordinate."""
    image_id: str
    pixel: PixelPoint
    ground: EcefPoint
    sigma_px: float = 1.0
    role: str = "control"       # control | check
    gcp_id: str = ""
    source_tile: str = ""

    def __post_init__(self):
        if self.sigma_px <= 0:
            raise ValueError(f"GCP {self.gcp_id}: sigma_px must be positive")
        if self.role not in ("control", "check"):
            raise ValueError(f"GCP {self.gcp_id}: invalid role '{self.role}'")
        radius = float(np.linalg.norm(self.ground.as_array()))
        if not 6.2e6 <= radius <= 7.5e6:
            raise ValueError(f"GCP {self.gcp_id}: ground point off the Earth-surface shell ({radius:.0f} m)")


@dataclass
class TiePoint:
    """Image feature seen in >= 2 images; ground coordinates are estimated."""
    tie_id: str
    observations: List[Tuple[str, PixelPoint]]
    ground: Optional[EcefPoint] = None
    sigma_px: float = 1.0

    def __post_init__(self):
        images = {image_id for image_id, _ in self.observations}
        if len(self.observations) < 2 or len(images) < 2:
            raise ValueError(f"Tie point {self.tie_id}: needs observations in >= 2 distinct images")


@dataclass
class AdjustmentReport:
    """Outcome of a bundle adjustment."""
    sigma0: float
    rmse_xyz_checkpoints: Optional[Tuple[float, float, float]]
    residuals: np.ndarray                 # (n_obs, 2) px, weighted-out observations included
    observation_ids: List[str]
    observation_images: List[str]
    observation_pixels: np.ndarray        # (n_obs, 2) col/row
    converged: bool
    iterations: int
    redundancy: int
    observation_roles: List[str] = field(default_factory=list)
    rejected: int = 0
    outlier_rule: str = "3-sigma0 reweighting, hard rejection after 3 rounds"
    sse_history: List[float] = field(default_factory=list)
    plausibility: Dict[str, Dict[str, Any]] = field(default_factory=dict)

    def __post_init__(self):
        if self.sigma0 < 0:
            raise ValueError("sigma0 must be non-negative")
        self.residuals = np.asarray(self.residuals, dtype=float).reshape(-1, 2)
        if self.residuals.shape != (len(self.observation_ids), 2):
            raise ValueError("residual count must be 2 x observation count")
        if not self.observation_roles:
            self.observation_roles = ["control"] * len(self.observation_ids)

    def residuals_for(self, image_id: str, roles: Sequence[str] = ("control", "check")) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel positions and residual vectors of one image's observations."""
        mask = np.array(
            [img == image_id and role in roles for img, role in zip(self.observation_images, self.observation_roles)],
            dtype=bool,
        )
        pixels = np.asarray(self.observation_pixels, dtype=float).reshape(-1, 2)
        return pixels[mask], self.residuals[mask]

    def to_dict(self) -> Dict[str, Any]:
        def _num(v):
            v = float(v)
            return v if np.isfinite(v) else None

        rmse = None if self.rmse_xyz_checkpoints is None else [_num(v) for v in self.rmse_xyz_checkpoints]
        return {
            "sigma0_px": float(self.sigma0),
            "rmse_xyz_checkpoints_m": rmse,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "redundancy": int(self.redundancy),
            "rejected_observations": int(self.rejected),
            "outlier_rule": self.outlier_rule,
            "observations": [
                {
                    "id": oid,
                    "image_id": img,
                    "role": role,
                    "col": float(px[0]),
                    "row": float(px[1]),
                    "dx_px": _num(res[0]),
                    "dy_px": _num(res[1]),
                }
                for oid, img, role, px, res in zip(
                    self.observation_ids, self.observation_images, self.observation_roles,
                    self.observation_pixels, self.residuals
                )
            ],
            "plausibility": self.plausibility,
        }


@dataclass
class ScanPart:
    """One of the four overlapping USGS scan parts of a film strip."""
    label: str
    raster: Any   # RasterGrid

    def __post_init__(self):
        if self.label not in ("a", "b", "c", "d"):
            raise ValueError(f"Scan part label must be a|b|c|d, got '{self.label}'")


@dataclass
class StripeTrace:
    """Per-column row position of a PG stripe edge."""
    side: str                 # top | bottom
    positions: np.ndarray     # (n_cols,) float rows, NaN where missing
    valid: np.ndarray         # (n_cols,) bool

    @property
    def valid_fraction(self) -> float:
        return float(np.mean(self.valid)) if self.valid.size else 0.0


@dataclass(frozen=True)
class Rigid2D:
    """Rotation + translation in pixel space: p' = R(rotation) p + t."""
    rotation: float
    tx: float
    ty: float

    def matrix(self) -> np.ndarray:
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        return np.array([[c, -s, self.tx], [s, c, self.ty], [0.0, 0.0, 1.0]])

    def apply(self, xy: np.ndarray) -> np.ndarray:
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        c, s = np.cos(self.rotation), np.sin(self.rotation)
        x, y = xy[:, 0], xy[:, 1]
        return np.column_stack([c * x - s * y + self.tx, s * x + c * y + self.ty])

    def compose(self, other: "Rigid2D") -> "Rigid2D":
        """self after other."""
        m = self.matrix() @ other.matrix()
        return Rigid2D(float(np.arctan2(m[1, 0], m[0, 0])), float(m[0, 2]), float(m[1, 2]))

    def inverse(self) -> "Rigid2D":
        m = np.linalg.inv(self.matrix())
        return Rigid2D(-self.rotation, float(m[0, 2]), float(m[1, 2]))

    @classmethod
    def identity(cls) -> "Rigid2D":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class FootprintEstimate:
    """Approximate film footprint: corners ordered along the film (start-left,
    start-right, end-right, end-left) and an uncertainty radius."""
    corners: Tuple[GeodeticPoint, GeodeticPoint, GeodeticPoint, GeodeticPoint]
    uncertainty_km: float

    def __post_init__(self):
        if len(self.corners) != 4:
            raise ValueError("Footprint needs exactly 4 corners")
        if self.uncertainty_km <= 0:
            raise ValueError("Footprint uncertainty must be positive")

    def bounds(self) -> Tuple[float, float, float, float]:
        lons = [c.lon for c in self.corners]
        lats = [c.lat for c in self.corners]
        return min(lons), min(lats), max(lons), max(lats)

    def center(self) -> GeodeticPoint:
        return GeodeticPoint(
            float(np.mean([c.lon for c in self.corners])),
            float(np.mean([c.lat for c in self.corners])),
            float(np.mean([c.h for c in self.corners])),
        )


@dataclass(frozen=True)
class TileSpec:
    """A Corona window paired with a reference window for the matcher."""
    tile_id: str
    corona_window: Tuple[int, int, int, int]              # col, row, w, h (px)
    reference_window: Tuple[float, float, float, float]   # lon_min, lat_min, lon_max, lat_max
    scale: float                                          # Corona px per matcher px
    mode: str = "fine"
    resampling: str = "area-average"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tile_id": self.tile_id,
            "corona_window": list(self.corona_window),
            "reference_window": list(self.reference_window),
            "scale": self.scale,
            "mode": self.mode,
            "resampling": self.resampling,
        }


@dataclass
class MatchSet:
    """Corona pixel ↔ geolocated reference point correspondences."""
    tile_ids: List[str]
    corona: np.ndarray       # (n, 2) col, row
    reference: np.ndarray    # (n, 2) lon, lat
    confidence: np.ndarray   # (n,)

    def __post_init__(self):
        n = len(self.tile_ids)
        self.corona = np.asarray(self.corona, dtype=float).reshape(n, 2)
        self.reference = np.asarray(self.reference, dtype=float).reshape(n, 2)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(n)
        if n and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValueError("Match confidence must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.tile_ids)

    def subset(self, mask: np.ndarray) -> "MatchSet":
        idx = np.flatnonzero(mask)
        return MatchSet(
            [self.tile_ids[i] for i in idx],
            self.corona[idx],
            self.reference[idx],
            self.confidence[idx],
        )


@dataclass
class Affine3D:
    """12-parameter 3D affine transform p' = A p + t (meters)."""
    matrix: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)

    @classmethod
    def identity(cls) -> "Affine3D":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_params(cls, params: Sequence[float]) -> "Affine3D":
        """params: 9 linear-part deltas from identity (row-major), then 3 translations."""
        p = np.asarray(params, dtype=float)
        return cls(np.eye(3) + p[:9].reshape(3, 3), p[9:12])

    def params(self) -> np.ndarray:
        return np.concatenate([(self.matrix - np.eye(3)).ravel(), self.translation])

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return points @ self.matrix.T + self.translation

    def linear_deviation(self) -> float:
        """Operator 2-norm of (A - I)."""
        return float(np.linalg.norm(self.matrix - np.eye(3), 2))

    def is_small(self, tolerance: float = 0.05) -> bool:
        return self.linear_deviation() <= tolerance

    def to_dict(self) -> Dict[str, Any]:
        return {"matrix": self.matrix.tolist(), "translation": self.translation.tolist()}


@dataclass
class DhReport:
    """Elevation-difference statistics over a mask."""
    nmad: float
    median: float
    valid_fraction: float
    count: int
    nmad_filtered: float
    median_filtered: float
    tile_transforms: List[Dict[str, Any]] = field(default_factory=list)
    stable_mask: str = ""
    flagged_tiles: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.nmad < 0:
            raise ValueError("NMAD must be non-negative")
        if not 0.0 <= self.valid_fraction <= 1.0:
            raise ValueError("valid fraction must lie in [0, 1]")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "nmad_m": float(self.nmad),
            "median_m": float(self.median),
            "valid_fraction": float(self.valid_fraction),
            "count": int(self.count),
            "nmad_filtered_m": float(self.nmad_filtered),
            "median_filtered_m": float(self.median_filtered),
            "tile_transforms": self.tile_transforms,
            "stable_mask": self.stable_mask,
            "flagged_tiles": self.flagged_tiles,
        }
