"""
Rotating-slit panoramic camera model.

Ground points are projected through time-dependent exterior orientation:
the slit at scan angle alpha = x_p / f is exposed at normalized time
t = (x_p + L) / 2L, the camera sits at P(t) = P0 + P1 t with attitude
(omega0 + omega01 t, phi0 + phi01 t, kappa0 + kappa01 t), and image motion
compensation shifts y by y_imc = -imc * f * sin(alpha) * cos(omega0).

Attitude angles are expressed in the local east-north-up frame at the
camera's fixed reference (frame_lon, frame_lat); positions are ECEF.
"""
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np

from .errors import BehindCamera, DataError, MissingInput, NoConvergence
from .geodesy import enu_rotation, euler_to_rotation
from .models import EcefPoint, ImagePointMM, PixelPoint
from .validation import validate_camera_record

logger = logging.getLogger(__name__)

PARAMETER_NAMES = (
    "X0", "Y0", "Z0",
    "X01", "Y01", "Z01",
    "omega0", "phi0", "kappa0",
    "omega01", "phi01", "kappa01",
    "imc",
)
N_PARAMETERS = len(PARAMETER_NAMES)

# KH-4 J-3 camera constants
KH4_FOCAL_LENGTH_MM = 609.6
KH4_FILM_HALF_LENGTH_MM = 372.5
KH4_FILM_HALF_WIDTH_MM = 28.0
MAX_HALF_FIELD_RAD = math.radians(35.5)

PROJECTION_MAX_ITERATIONS = 20
PROJECTION_TOLERANCE_MM = 1e-4
PROJECTION_TARGET_MM = 1e-10


@dataclass(frozen=True)
class PanoramicCamera:
    """The 13 adjustable parameters plus fixed interior geometry of one camera."""
    X0: float
    Y0: float
    Z0: float
    X01: float = 0.0
    Y01: float = 0.0
    Z01: float = 0.0
    omega0: float = 0.0
    phi0: float = 0.0
    kappa0: float = 0.0
    omega01: float = 0.0
    phi01: float = 0.0
    kappa01: float = 0.0
    imc: float = 0.0
    f_mm: float = KH4_FOCAL_LENGTH_MM
    film_half_length_mm: float = KH4_FILM_HALF_LENGTH_MM
    film_half_width_mm: float = KH4_FILM_HALF_WIDTH_MM
    frame_lon: float = 0.0
    frame_lat: float = 0.0
    image_id: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if self.f_mm <= 0:
            raise ValueError(f"Focal length must be positive, got {self.f_mm}")
        if self.film_half_length_mm <= 0 or self.film_half_width_mm <= 0:
            raise ValueError("Film extents must be positive")
        if self.film_half_length_mm / self.f_mm > MAX_HALF_FIELD_RAD:
            raise ValueError(
                f"Film half-length {self.film_half_length_mm} mm exceeds the 35.5 deg half field at f={self.f_mm} mm"
            )

    def parameters(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in PARAMETER_NAMES], dtype=float)

    def with_parameters(self, values: np.ndarray) -> "PanoramicCamera":
        values = np.asarray(values, dtype=float)
        if values.shape != (N_PARAMETERS,):
            raise ValueError(f"Expected {N_PARAMETERS} parameters, got shape {values.shape}")
        return replace(self, **{name: float(v) for name, v in zip(PARAMETER_NAMES, values)})

    def frame_rotation(self) -> np.ndarray:
        """Fixed ECEF -> local level rotation at the camera's reference point."""
        return enu_rotation(self.frame_lon, self.frame_lat)

    @property
    def position0(self) -> np.ndarray:
        return np.array([self.X0, self.Y0, self.Z0])

    @property
    def position_rate(self) -> np.ndarray:
        return np.array([self.X01, self.Y01, self.Z01])

    @property
    def attitude0(self) -> np.ndarray:
        return np.array([self.omega0, self.phi0, self.kappa0])

    @property
    def attitude_rate(self) -> np.ndarray:
        return np.array([self.omega01, self.phi01, self.kappa01])


# ---------------------------------------------------------------------------
# Scalar model pieces
# ---------------------------------------------------------------------------

def scan_angle(x_p, f_mm: float):
    """Slit angle alpha = x_p / f (radians)."""
    if f_mm <= 0:
        raise ValueError("Focal length must be positive")
    alpha = np.asarray(x_p, dtype=float) / f_mm
    return alpha if alpha.ndim else float(alpha)


def scan_time(x_p, camera: PanoramicCamera):
    """Normalized exposure time t in [0, 1], linear in x_p."""
    length = camera.film_half_length_mm
    t = (np.asarray(x_p, dtype=float) + length) / (2.0 * length)
    return t if np.ndim(t) else float(t)


def eo_at(camera: PanoramicCamera, t: float) -> Tuple[EcefPoint, np.ndarray]:
    """Exterior orientation at time t: ECEF position and ECEF->camera rotation."""
    position = camera.position0 + camera.position_rate * t
    angles = camera.attitude0 + camera.attitude_rate * t
    rotation = euler_to_rotation(*angles) @ camera.frame_rotation()
    return EcefPoint.from_array(position), rotation


def imc_shift(camera: PanoramicCamera, alpha):
    """y_imc = -imc * f * sin(alpha) * cos(omega0), in mm."""
    shift = -camera.imc * camera.f_mm * np.sin(alpha) * np.cos(camera.omega0)
    return shift if np.ndim(shift) else float(shift)


# ---------------------------------------------------------------------------
# Batched orientation helpers
# ---------------------------------------------------------------------------

def _euler_batch(omega: np.ndarray, phi: np.ndarray, kappa: np.ndarray) -> np.ndarray:
    co, so = np.cos(omega), np.sin(omega)
    cp, sp = np.cos(phi), np.sin(phi)
    ck, sk = np.cos(kappa), np.sin(kappa)
    r = np.empty(omega.shape + (3, 3))
    r[..., 0, 0] = ck * cp
    r[..., 0, 1] = ck * sp * so - sk * co
    r[..., 0, 2] = ck * sp * co + sk * so
    r[..., 1, 0] = sk * cp
    r[..., 1, 1] = sk * sp * so + ck * co
    r[..., 1, 2] = sk * sp * co - ck * so
    r[..., 2, 0] = -sp
    r[..., 2, 1] = cp * so
    r[..., 2, 2] = cp * co
    return r


def _elementary_batch(angles: np.ndarray, axis: int, derivative: bool) -> np.ndarray:
    c, s = np.cos(angles), np.sin(angles)
    n = angles.shape[0]
    m = np.zeros((n, 3, 3))
    i, j = [(1, 2), (2, 0), (0, 1)][axis]
    if derivative:
        m[:, i, i] = -s
        m[:, j, j] = -s
        m[:, i, j] = -c
        m[:, j, i] = c
    else:
        m[:, axis, axis] = 1.0
        m[:, i, i] = c
        m[:, j, j] = c
        m[:, i, j] = -s
        m[:, j, i] = s
    return m


def _euler_batch_derivatives(angles: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """d/d(omega, phi, kappa) of Rz(kappa) Ry(phi) Rx(omega), each (n, 3, 3)."""
    rx = _elementary_batch(angles[:, 0], 0, False)
    ry = _elementary_batch(angles[:, 1], 1, False)
    rz = _elementary_batch(angles[:, 2], 2, False)
    drx = _elementary_batch(angles[:, 0], 0, True)
    dry = _elementary_batch(angles[:, 1], 1, True)
    drz = _elementary_batch(angles[:, 2], 2, True)
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def _orientation(camera: PanoramicCamera, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions (n,3), rotations (n,3,3) and attitude angles (n,3) at times t."""
    t = np.asarray(t, dtype=float)
    positions = camera.position0[None, :] + camera.position_rate[None, :] * t[:, None]
    angles = camera.attitude0[None, :] + camera.attitude_rate[None, :] * t[:, None]
    rotations = _euler_batch(angles[:, 0], angles[:, 1], angles[:, 2]) @ camera.frame_rotation()
    return positions, rotations, angles


def _as_points(ground) -> Tuple[np.ndarray, bool]:
    if isinstance(ground, EcefPoint):
        return ground.as_array()[None, :], True
    arr = np.asarray(ground, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------

@dataclass
class ProjectionState:
    """Converged fixed point for a batch of ground points."""
    xy: np.ndarray          # (n, 2) mm
    t: np.ndarray           # (n,)
    n_cam: np.ndarray       # (n, 3) camera-frame vectors R_t (X - P_t)
    ok: np.ndarray          # (n,) bool: in front of camera and converged
    behind: np.ndarray      # (n,) bool
    iterations: int


def solve_projection(camera: PanoramicCamera, ground: np.ndarray,
                     max_iterations: int = PROJECTION_MAX_ITERATIONS,
                     tolerance_mm: float = PROJECTION_TOLERANCE_MM) -> ProjectionState:
    """
    Fixed-point solve of x_p = f atan(-Nx/Nz) with N evaluated at t(x_p),
    seeded at t = 0.5. Never raises; failures are flagged per point.
    """
    ground = np.atleast_2d(np.asarray(ground, dtype=float))
    n = ground.shape[0]
    f = camera.f_mm
    x = np.full(n, np.nan)
    t = np.full(n, 0.5)
    delta = np.full(n, np.inf)
    behind = np.zeros(n, dtype=bool)
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        positions, rotations, _ = _orientation(camera, t)
        n_cam = np.einsum("nij,nj->ni", rotations, ground - positions)
        behind = n_cam[:, 2] >= 0.0
        x_new = f * np.arctan2(n_cam[:, 0], -n_cam[:, 2])
        delta = np.where(np.isnan(x), np.inf, np.abs(x_new - x))
        x = x_new
        t = scan_time(x, camera)
        if np.all((delta < PROJECTION_TARGET_MM) | behind):
            break

    positions, rotations, _ = _orientation(camera, t)
    n_cam = np.einsum("nij,nj->ni", rotations, ground - positions)
    behind = behind | (n_cam[:, 2] >= 0.0)
    x = f * np.arctan2(n_cam[:, 0], -n_cam[:, 2])
    alpha = x / f
    with np.errstate(divide="ignore", invalid="ignore"):
        y = -imc_shift(camera, alpha) - f * np.cos(alpha) * n_cam[:, 1] / n_cam[:, 2]
    converged = delta < tolerance_mm
    ok = converged & ~behind
    return ProjectionState(np.column_stack([x, y]), t, n_cam, ok, behind, iterations)


def project(camera: PanoramicCamera, ground) -> Union[ImagePointMM, np.ndarray]:
    """
    Project ECEF ground point(s) to panoramic photo coordinates (mm).

    Args:
        camera: Panoramic camera
        ground: EcefPoint, (3,) array or (n, 3) array

    Returns:
        ImagePointMM for a single point, else an (n, 2) array

    Raises:
        BehindCamera: If a point lies behind the camera (Nz >= 0)
        NoConvergence: If the fixed point is not reached in 20 iterations
    """
    points, single = _as_points(ground)
    state = solve_projection(camera, points)
    if np.any(state.behind):
        raise BehindCamera(f"{int(state.behind.sum())} point(s) behind camera {camera.image_id or ''}".strip())
    if not np.all(state.ok):
        raise NoConvergence(
            f"Projection did not converge within {PROJECTION_MAX_ITERATIONS} iterations "
            f"for {int((~state.ok).sum())} point(s)"
        )
    if single:
        return ImagePointMM(float(state.xy[0, 0]), float(state.xy[0, 1]))
    return state.xy


def project_with_status(camera: PanoramicCamera, ground: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project many points; returns (xy (n, 2) mm, ok mask) without raising."""
    state = solve_projection(camera, ground)
    xy = np.where(state.ok[:, None], state.xy, np.nan)
    return xy, state.ok


def project_jacobian(camera: PanoramicCamera, ground: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """
    Projection with analytic derivatives.

    The implicit dependence of x_p on t is handled by differentiating the
    fixed point x = g(x, p): dx/dp = (dg/dp) / (1 - dg/dx).

    Returns:
        xy (n, 2) mm, d(xy)/d(camera parameters) (n, 2, 13),
        d(xy)/d(ground) (n, 2, 3), ok mask (n,)
    """
    ground = np.atleast_2d(np.asarray(ground, dtype=float))
    state = solve_projection(camera, ground)
    n = ground.shape[0]
    f = camera.f_mm
    two_l = 2.0 * camera.film_half_length_mm
    t = state.t
    positions, rotations, angles = _orientation(camera, t)
    frame = camera.frame_rotation()
    d = ground - positions
    n_cam = state.n_cam
    nx, ny, nz = n_cam[:, 0], n_cam[:, 1], n_cam[:, 2]
    x = state.xy[:, 0]
    alpha = x / f

    # dE/dtheta_i @ F @ d for the three attitude angles
    fd = d @ frame.T
    d_e_dtheta = np.stack(
        [np.einsum("nij,nj->ni", dr, fd) for dr in _euler_batch_derivatives(angles)],
        axis=2,
    )

    # dN/dt
    dn_dt = (
        np.einsum("nij,j->ni", d_e_dtheta, camera.attitude_rate)
        - np.einsum("nij,j->ni", rotations, camera.position_rate)
    )

    # dN/dp (n, 3, 13)
    dn_dp = np.zeros((n, 3, N_PARAMETERS))
    dn_dp[:, :, 0:3] = -rotations
    dn_dp[:, :, 3:6] = -rotations * t[:, None, None]
    dn_dp[:, :, 6:9] = d_e_dtheta
    dn_dp[:, :, 9:12] = d_e_dtheta * t[:, None, None]

    # x = g(N): dg/dN
    denom = nx * nx + nz * nz
    g_n = np.zeros((n, 3))
    g_n[:, 0] = -f * nz / denom
    g_n[:, 2] = f * nx / denom
    g_x = np.einsum("ni,ni->n", g_n, dn_dt) / two_l
    scale = 1.0 / (1.0 - g_x)
    dx_dp = np.einsum("ni,nip->np", g_n, dn_dp) * scale[:, None]
    dx_dground = np.einsum("ni,nij->nj", g_n, rotations) * scale[:, None]

    # y = h(x, N)
    cos_a, sin_a = np.cos(alpha), np.sin(alpha)
    cos_w0, sin_w0 = np.cos(camera.omega0), np.sin(camera.omega0)
    h_n = np.zeros((n, 3))
    h_n[:, 1] = -f * cos_a / nz
    h_n[:, 2] = f * cos_a * ny / (nz * nz)
    h_x = (camera.imc * cos_a * cos_w0 + sin_a * ny / nz) + np.einsum("ni,ni->n", h_n, dn_dt) / two_l
    dy_dp = np.einsum("ni,nip->np", h_n, dn_dp)
    dy_dp[:, 12] += f * sin_a * cos_w0
    dy_dp[:, 6] += -camera.imc * f * sin_a * sin_w0
    dy_dp += h_x[:, None] * dx_dp
    dy_dground = np.einsum("ni,nij->nj", h_n, rotations) + h_x[:, None] * dx_dground

    j_cam = np.stack([dx_dp, dy_dp], axis=1)
    j_ground = np.stack([dx_dground, dy_dground], axis=1)
    return state.xy, j_cam, j_ground, state.ok


# ---------------------------------------------------------------------------
# Backprojection
# ---------------------------------------------------------------------------

def backproject_rays(camera: PanoramicCamera, xy_mm: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rays for (n, 2) image points: origins (n, 3) ECEF and unit directions (n, 3)."""
    xy_mm = np.atleast_2d(np.asarray(xy_mm, dtype=float))
    f = camera.f_mm
    alpha = xy_mm[:, 0] / f
    t = scan_time(xy_mm[:, 0], camera)
    positions, rotations, _ = _orientation(camera, t)
    v = np.column_stack([
        f * np.sin(alpha),
        xy_mm[:, 1] + imc_shift(camera, alpha),
        -f * np.cos(alpha),
    ])
    directions = np.einsum("nji,nj->ni", rotations, v)
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return positions, directions


def backproject_ray(camera: PanoramicCamera, point: ImagePointMM) -> Tuple[EcefPoint, np.ndarray]:
    """Ray from the exposure station through an image point, oriented toward the Earth."""
    origins, directions = backproject_rays(camera, [[point.x_p, point.y_p]])
    return EcefPoint.from_array(origins[0]), directions[0]


def intersect_rays(origins: np.ndarray, directions: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Least-squares closest point to a bundle of rays.

    Returns:
        (point (3,), largest distance from the point to any ray)
    """
    origins = np.atleast_2d(np.asarray(origins, dtype=float))
    directions = np.atleast_2d(np.asarray(directions, dtype=float))
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    projectors = np.eye(3)[None, :, :] - directions[:, :, None] * directions[:, None, :]
    lhs = projectors.sum(axis=0)
    rhs = np.einsum("nij,nj->i", projectors, origins)
    point = np.linalg.solve(lhs, rhs)
    offsets = np.einsum("nij,nj->ni", projectors, point[None, :] - origins)
    return point, float(np.max(np.linalg.norm(offsets, axis=1)))


def intersect_ellipsoid_height(origins: np.ndarray, directions: np.ndarray, height: float) -> np.ndarray:
    """
    Nearest intersection of rays with the ellipsoid offset by `height` meters
    (semi-axes a+h, a+h, b+h). Returns (n, 3); NaN where a ray misses.
    """
    from .geodesy import WGS84_A, WGS84_B
    a = WGS84_A + height
    b = WGS84_B + height
    scale = np.array([1.0 / a, 1.0 / a, 1.0 / b])
    o = np.atleast_2d(origins) * scale
    d = np.atleast_2d(directions) * scale
    qa = np.einsum("ni,ni->n", d, d)
    qb = 2.0 * np.einsum("ni,ni->n", o, d)
    qc = np.einsum("ni,ni->n", o, o) - 1.0
    disc = qb * qb - 4.0 * qa * qc
    with np.errstate(invalid="ignore"):
        s = (-qb - np.sqrt(disc)) / (2.0 * qa)
    s = np.where((disc >= 0) & (s > 0), s, np.nan)
    return np.atleast_2d(origins) + s[:, None] * np.atleast_2d(directions)


# ---------------------------------------------------------------------------
# Film mm <-> scanned pixels
# ---------------------------------------------------------------------------

def film_dimensions_px(camera: PanoramicCamera, pitch_um: float) -> Tuple[int, int]:
    """Scanned image width/height for a given scan pitch."""
    pitch_mm = pitch_um / 1000.0
    return (
        int(round(2.0 * camera.film_half_length_mm / pitch_mm)),
        int(round(2.0 * camera.film_half_width_mm / pitch_mm)),
    )


def mm_to_pixel(xy_mm, pitch_um: float, width: int, height: int):
    """
    Film mm -> pixel (col right, row down, format center at (w/2, h/2)).

    Returns:
        (cols, rows, inside) arrays; out-of-bounds points are flagged, not clamped
    """
    if pitch_um <= 0:
        raise ValueError("Scan pitch must be positive")
    xy = np.atleast_2d(np.asarray(xy_mm, dtype=float))
    pitch_mm = pitch_um / 1000.0
    cols = width / 2.0 + xy[:, 0] / pitch_mm
    rows = height / 2.0 - xy[:, 1] / pitch_mm
    inside = (cols >= 0) & (cols <= width) & (rows >= 0) & (rows <= height)
    return cols, rows, inside


def pixel_to_mm(cols, rows, pitch_um: float, width: int, height: int) -> np.ndarray:
    """Inverse of mm_to_pixel; returns (n, 2) mm."""
    if pitch_um <= 0:
        raise ValueError("Scan pitch must be positive")
    pitch_mm = pitch_um / 1000.0
    cols = np.atleast_1d(np.asarray(cols, dtype=float))
    rows = np.atleast_1d(np.asarray(rows, dtype=float))
    return np.column_stack([(cols - width / 2.0) * pitch_mm, (height / 2.0 - rows) * pitch_mm])


def point_to_pixel(point: ImagePointMM, pitch_um: float, width: int, height: int) -> Tuple[PixelPoint, bool]:
    cols, rows, inside = mm_to_pixel([[point.x_p, point.y_p]], pitch_um, width, height)
    return PixelPoint(float(cols[0]), float(rows[0])), bool(inside[0])


def pixel_to_point(pixel: PixelPoint, pitch_um: float, width: int, height: int) -> ImagePointMM:
    xy = pixel_to_mm(pixel.col, pixel.row, pitch_um, width, height)
    return ImagePointMM(float(xy[0, 0]), float(xy[0, 1]))


# ---------------------------------------------------------------------------
# Parameter plausibility
# ---------------------------------------------------------------------------

def expected_imc(velocity_m_s: float, altitude_m: float, scan_rate_rad_s: float) -> float:
    """IMC constant V / (H delta)."""
    return velocity_m_s / (altitude_m * scan_rate_rad_s)


def expected_along_track_motion(velocity_m_s: float, scan_duration_s: float) -> float:
    """Distance flown during one scan (m)."""
    return velocity_m_s * scan_duration_s


def expected_attitude_compensation(velocity_m_s: float, scan_duration_s: float, altitude_m: float) -> float:
    """Angle (rad) subtended at a format-center object point by the motion during one scan."""
    return math.atan2(velocity_m_s * scan_duration_s, altitude_m)


def plausibility_report(camera: PanoramicCamera,
                        velocity_m_s: float = 7700.0,
                        altitude_m: float = 170000.0,
                        scan_rate_rad_s: float = 3.3,
                        scan_duration_s: float = 0.36) -> Dict[str, Any]:
    """Compare adjusted parameters against orbit/camera expectations."""
    imc_expected = expected_imc(velocity_m_s, altitude_m, scan_rate_rad_s)
    motion_expected = expected_along_track_motion(velocity_m_s, scan_duration_s)
    angle_expected = expected_attitude_compensation(velocity_m_s, scan_duration_s, altitude_m)
    local_rate = camera.frame_rotation() @ camera.position_rate
    motion = float(np.hypot(local_rate[0], local_rate[1]))

    if abs(camera.imc - imc_expected) <= 0.5 * imc_expected:
        mechanism = "lens-translation"
    elif abs(camera.imc) < 0.1 * imc_expected and abs(abs(camera.omega01) - angle_expected) <= 0.5 * angle_expected:
        mechanism = "camera-rotation"
    else:
        mechanism = "indeterminate"

    return {
        "imc": camera.imc,
        "imc_expected": imc_expected,
        "along_track_motion_m": motion,
        "along_track_motion_expected_m": motion_expected,
        "omega01_deg": math.degrees(camera.omega01),
        "attitude_compensation_expected_deg": math.degrees(angle_expected),
        "imc_mechanism": mechanism,
    }


# ---------------------------------------------------------------------------
# Camera files
# ---------------------------------------------------------------------------

def camera_to_dict(camera: PanoramicCamera, pitch_um: Optional[float] = None) -> Dict[str, Any]:
    record = {
        "image_id": camera.image_id,
        "f_mm": camera.f_mm,
        "film_half_length_mm": camera.film_half_length_mm,
        "film_half_width_mm": camera.film_half_width_mm,
        "frame": {"lon": camera.frame_lon, "lat": camera.frame_lat},
        "parameters": {name: getattr(camera, name) for name in PARAMETER_NAMES},
        "metadata": dict(camera.metadata),
    }
    if pitch_um is not None:
        record["pitch_um"] = pitch_um
    return record


def camera_from_dict(record: Dict[str, Any], source: str = "<camera>") -> PanoramicCamera:
    validate_camera_record(record, source)
    frame = record.get("frame", {})
    return PanoramicCamera(
        **{name: float(record["parameters"][name]) for name in PARAMETER_NAMES},
        f_mm=float(record["f_mm"]),
        film_half_length_mm=float(record["film_half_length_mm"]),
        film_half_width_mm=float(record["film_half_width_mm"]),
        frame_lon=float(frame.get("lon", 0.0)),
        frame_lat=float(frame.get("lat", 0.0)),
        image_id=str(record.get("image_id", "")),
        metadata=dict(record.get("metadata", {})),
    )


def save_camera(camera: PanoramicCamera, filepath: Union[str, Path], pitch_um: Optional[float] = None) -> None:
    """Write a camera JSON file (SI units, radians)."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    try:
        with open(filepath, "w", encoding="utf-8") as f:
            json.dump(camera_to_dict(camera, pitch_um), f, indent=2, sort_keys=True)
        logger.debug(f"Saved camera '{camera.image_id}' to '{filepath}'")
    except Exception as e:
        logger.error(f"Error saving camera to '{filepath}': {e}")
        raise


def load_camera(filepath: Union[str, Path]) -> Tuple[PanoramicCamera, Optional[float]]:
    """
    Read a camera JSON file.

    Returns:
        (camera, pitch_um or None)
    """
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Camera file not found: {filepath}")
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            record = json.load(f)
    except json.JSONDecodeError as e:
        logger.error(f"Invalid JSON in camera file '{filepath}': {e}")
        raise DataError(f"Invalid camera file '{filepath}': {e}") from e
    camera = camera_from_dict(record, str(filepath))
    pitch = record.get("pitch_um")
    return camera, (float(pitch) if pitch is not None else None)
