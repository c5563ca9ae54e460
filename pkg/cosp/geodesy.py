"""Angles, rotations, WGS84 geodetic/ECEF conversion, UTM hooks and NMAD."""
import logging
from functools import lru_cache
from typing import Iterable, Tuple, Union

import numpy as np
from pyproj import Transformer

from .errors import GeodesyError
from .models import EcefPoint, GeodeticPoint

logger = logging.getLogger(__name__)

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)

NMAD_FACTOR = 1.4826
MIN_ECEF_RADIUS = 1000.0
GEODETIC_TOLERANCE_M = 1e-9
GEODETIC_MAX_ITERATIONS = 5

ArrayLike = Union[float, np.ndarray]


# ---------------------------------------------------------------------------
# Rotations: R = Rz(kappa) @ Ry(phi) @ Rx(omega), applied to object-space
# differences (camera = R @ (X - X0)).
# ---------------------------------------------------------------------------

def _rx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _ry(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def _rz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drx(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])


def _dry(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, 0.0, c], [0.0, 0.0, 0.0], [-c, 0.0, -s]])


def _drz(a: float) -> np.ndarray:
    c, s = np.cos(a), np.sin(a)
    return np.array([[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]])


def euler_to_rotation(omega: float, phi: float, kappa: float) -> np.ndarray:
    """Rotation matrix from omega-phi-kappa (radians): Rz(kappa) Ry(phi) Rx(omega)."""
    if not np.all(np.isfinite([omega, phi, kappa])):
        raise ValueError(f"Non-finite Euler angles: {omega}, {phi}, {kappa}")
    return _rz(kappa) @ _ry(phi) @ _rx(omega)


def euler_rotation_derivatives(omega: float, phi: float, kappa: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Partial derivatives of euler_to_rotation w.r.t. omega, phi, kappa."""
    rx, ry, rz = _rx(omega), _ry(phi), _rz(kappa)
    return (
        rz @ ry @ _drx(omega),
        rz @ _dry(phi) @ rx,
        _drz(kappa) @ ry @ rx,
    )


def rotation_to_euler(rotation: np.ndarray) -> Tuple[float, float, float]:
    """Recover (omega, phi, kappa) from a matrix built by euler_to_rotation.

    Unique for phi in (-pi/2, pi/2).
    """
    r = np.asarray(rotation, dtype=float)
    phi = float(-np.arcsin(np.clip(r[2, 0], -1.0, 1.0)))
    omega = float(np.arctan2(r[2, 1], r[2, 2]))
    kappa = float(np.arctan2(r[1, 0], r[0, 0]))
    return omega, phi, kappa


def is_rotation(rotation: np.ndarray, tol: float = 1e-12) -> bool:
    r = np.asarray(rotation, dtype=float)
    return (
        r.shape == (3, 3)
        and np.allclose(r.T @ r, np.eye(3), atol=tol)
        and abs(np.linalg.det(r) - 1.0) <= tol
    )


def enu_rotation(lon_deg: float, lat_deg: float) -> np.ndarray:
    """Rotation from ECEF to the local east-north-up frame at (lon, lat)."""
    lon, lat = np.radians(lon_deg), np.radians(lat_deg)
    sl, cl = np.sin(lon), np.cos(lon)
    sp, cp = np.sin(lat), np.cos(lat)
    return np.array([
        [-sl, cl, 0.0],
        [-sp * cl, -sp * sl, cp],
        [cp * cl, cp * sl, sp],
    ])


# ---------------------------------------------------------------------------
# Geodetic <-> ECEF
# ---------------------------------------------------------------------------

@lru_cache(maxsize=1)
def _ecef_transformers() -> Tuple[Transformer, Transformer]:
    forward = Transformer.from_crs("EPSG:4979", "EPSG:4978", always_xy=True)
    inverse = Transformer.from_crs("EPSG:4978", "EPSG:4979", always_xy=True)
    return forward, inverse


def geodetic_to_ecef_array(lon_deg: ArrayLike, lat_deg: ArrayLike, h: ArrayLike) -> np.ndarray:
    """Vectorized WGS84 geodetic -> ECEF; returns (..., 3) meters."""
    lon, lat, h = np.broadcast_arrays(np.asarray(lon_deg, dtype=float), np.asarray(lat_deg, dtype=float),
                                      np.asarray(h, dtype=float))
    forward, _ = _ecef_transformers()
    x, y, z = forward.transform(np.ravel(lon), np.ravel(lat), np.ravel(h))
    return np.column_stack([x, y, z]).reshape(lon.shape + (3,))


def ecef_to_geodetic_array(xyz: np.ndarray) -> np.ndarray:
    """
    Vectorized ECEF -> WGS84 geodetic; returns (..., 3) as lon, lat (deg), h (m).

    PROJ's closed-form inverse is refined by up to five correction steps
    against the forward conversion until every point reproduces its ECEF
    position to 1e-9 m.

    Raises:
        GeodesyError: If any point lies within 1 km of the Earth's center
    """
    xyz = np.asarray(xyz, dtype=float)
    radius = np.linalg.norm(xyz, axis=-1).ravel()
    if np.any(radius < MIN_ECEF_RADIUS):
        raise GeodesyError("ECEF point within 1 km of the Earth's center has no geodetic position")
    flat = xyz.reshape(-1, 3)
    axis_distance = np.hypot(flat[:, 0], flat[:, 1])
    _, inverse = _ecef_transformers()
    lon, lat, h = (np.asarray(v, dtype=float) for v in inverse.transform(flat[:, 0], flat[:, 1], flat[:, 2]))

    for _ in range(GEODETIC_MAX_ITERATIONS):
        residual = flat - geodetic_to_ecef_array(lon, lat, h)
        if np.max(np.abs(residual), initial=0.0) < GEODETIC_TOLERANCE_M:
            break
        # residual in the local east/north/up frame
        dx, dy, dz = residual.T
        sl, cl = np.sin(np.radians(lon)), np.cos(np.radians(lon))
        sp, cp = np.sin(np.radians(lat)), np.cos(np.radians(lat))
        east = -sl * dx + cl * dy
        north = -sp * cl * dx - sp * sl * dy + cp * dz
        up = cp * cl * dx + cp * sl * dy + sp * dz
        with np.errstate(divide="ignore", invalid="ignore"):
            lon = lon + np.degrees(np.where(axis_distance > 0.0, east / axis_distance, 0.0))
        lat = lat + np.degrees(north / radius)
        h = h + up
    return np.column_stack([lon, lat, h]).reshape(xyz.shape)


def geodetic_to_ecef(point: GeodeticPoint) -> EcefPoint:
    """WGS84 geodetic -> ECEF for a single point."""
    return EcefPoint.from_array(geodetic_to_ecef_array(point.lon, point.lat, point.h))


def ecef_to_geodetic(point: EcefPoint) -> GeodeticPoint:
    """ECEF -> WGS84 geodetic for a single point."""
    lon, lat, h = ecef_to_geodetic_array(point.as_array())
    return GeodeticPoint(float(lon), float(lat), float(h))


# ---------------------------------------------------------------------------
# UTM (one configured zone per run)
# ---------------------------------------------------------------------------

def utm_zone_for(lon_deg: float) -> int:
    return int(np.floor((lon_deg + 180.0) / 6.0)) % 60 + 1


def utm_epsg(zone: int, north: bool = True) -> int:
    if not 1 <= zone <= 60:
        raise ValueError(f"UTM zone must be 1..60, got {zone}")
    return (32600 if north else 32700) + zone


@lru_cache(maxsize=16)
def _utm_transformers(zone: int, north: bool) -> Tuple[Transformer, Transformer]:
    epsg = utm_epsg(zone, north)
    forward = Transformer.from_crs("EPSG:4326", f"EPSG:{epsg}", always_xy=True)
    inverse = Transformer.from_crs(f"EPSG:{epsg}", "EPSG:4326", always_xy=True)
    return forward, inverse


def geodetic_to_utm(lon_deg: ArrayLike, lat_deg: ArrayLike, zone: int, north: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    forward, _ = _utm_transformers(zone, north)
    e, n = forward.transform(np.asarray(lon_deg, dtype=float), np.asarray(lat_deg, dtype=float))
    return np.asarray(e), np.asarray(n)


def utm_to_geodetic(easting: ArrayLike, northing: ArrayLike, zone: int, north: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    _, inverse = _utm_transformers(zone, north)
    lon, lat = inverse.transform(np.asarray(easting, dtype=float), np.asarray(northing, dtype=float))
    return np.asarray(lon), np.asarray(lat)


def ecef_to_utm(xyz: np.ndarray, zone: int, north: bool = True) -> np.ndarray:
    """ECEF (n, 3) -> UTM easting, northing, ellipsoidal height (n, 3)."""
    llh = ecef_to_geodetic_array(np.atleast_2d(xyz))
    e, n = geodetic_to_utm(llh[:, 0], llh[:, 1], zone, north)
    return np.column_stack([e, n, llh[:, 2]])


def utm_to_ecef(enh: np.ndarray, zone: int, north: bool = True) -> np.ndarray:
    enh = np.atleast_2d(np.asarray(enh, dtype=float))
    lon, lat = utm_to_geodetic(enh[:, 0], enh[:, 1], zone, north)
    return geodetic_to_ecef_array(lon, lat, enh[:, 2])


# ---------------------------------------------------------------------------
# Robust statistics
# ---------------------------------------------------------------------------

def nmad(values: Iterable[float]) -> float:
    """
    Normalized median absolute deviation: 1.4826 * median(|v - median(v)|).

    Non-finite values (nodata) are ignored.

    Raises:
        ValueError: If fewer than two finite values remain
    """
    v = np.asarray(values, dtype=float).ravel()
    v = v[np.isfinite(v)]
    if v.size < 2:
        raise ValueError(f"NMAD needs at least 2 finite values, got {v.size}")
    return float(NMAD_FACTOR * np.median(np.abs(v - np.median(v))))
