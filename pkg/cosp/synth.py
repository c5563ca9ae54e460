"""
Synthetic scenes with known truth.

A scene is a fore/aft panoramic pair over an analytic terrain (a base plane
plus Gaussian hills, defined in UTM coordinates) textured with band-limited
value noise. Everything is a deterministic function of the options and the
seed: hills, texture lattices, observation sampling and noise all draw from
sub-seeds of the scene seed.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .camera import (
    KH4_FILM_HALF_LENGTH_MM,
    KH4_FILM_HALF_WIDTH_MM,
    KH4_FOCAL_LENGTH_MM,
    PanoramicCamera,
    backproject_rays,
    camera_to_dict,
    expected_along_track_motion,
    expected_imc,
    film_dimensions_px,
    intersect_ellipsoid_height,
    mm_to_pixel,
    pixel_to_mm,
    project_with_status,
)
from .config import SynthOptions
from .geodesy import (
    ecef_to_geodetic_array,
    enu_rotation,
    geodetic_to_ecef_array,
    geodetic_to_utm,
    utm_epsg,
    utm_to_geodetic,
    utm_zone_for,
)
from .models import EcefPoint, GcpRecord, PixelPoint, Rigid2D, ScanPart, TiePoint
from .raster import RasterGrid
from .utils import derived_seed, parallel_map

logger = logging.getLogger(__name__)

ORBIT_VELOCITY_M_S = 7700.0
SCAN_DURATION_S = 0.36
SCAN_RATE_RAD_S = 3.3
RENDER_STEP_PX = 4
TEXTURE_OCTAVES = 4
INTENSITY_MEAN = 128.0
INTENSITY_SPREAD = 40.0

STRIPE_BAND_PX = 12
STRIPE_GAP_PX = 8
STRIPE_BRIGHT = 245.0
STRIPE_DARK = 15.0
RAIL_HOLE_PERIOD_PX = 150
RAIL_HOLE_RADIUS_PX = 2.5


# ---------------------------------------------------------------------------
# Terrain and texture
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Terrain:
    """Ellipsoidal height h(E, N) = base + sum of Gaussian hills, in one UTM zone."""
    zone: int
    north: bool
    origin_e: float
    origin_n: float
    base_height: float
    hills: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))   # de, dn, amplitude, sigma

    def height(self, e, n) -> np.ndarray:
        de = np.asarray(e, dtype=float) - self.origin_e
        dn = np.asarray(n, dtype=float) - self.origin_n
        h = np.full(np.broadcast(de, dn).shape, self.base_height)
        for he, hn, amp, sigma in self.hills:
            h = h + amp * np.exp(-((de - he) ** 2 + (dn - hn) ** 2) / (2.0 * sigma * sigma))
        return h

    def gradient(self, e, n) -> Tuple[np.ndarray, np.ndarray]:
        de = np.asarray(e, dtype=float) - self.origin_e
        dn = np.asarray(n, dtype=float) - self.origin_n
        ge = np.zeros(np.broadcast(de, dn).shape)
        gn = np.zeros_like(ge)
        for he, hn, amp, sigma in self.hills:
            g = amp * np.exp(-((de - he) ** 2 + (dn - hn) ** 2) / (2.0 * sigma * sigma)) / (sigma * sigma)
            ge = ge - g * (de - he)
            gn = gn - g * (dn - hn)
        return ge, gn

    def max_slope(self) -> float:
        """Steepest slope (radians) of any single hill, an upper bound for well-separated hills."""
        if len(self.hills) == 0:
            return 0.0
        return float(np.max(np.arctan(np.abs(self.hills[:, 2]) / self.hills[:, 3] * math.exp(-0.5))))

    def ground_points(self, e, n) -> np.ndarray:
        e = np.atleast_1d(np.asarray(e, dtype=float))
        n = np.atleast_1d(np.asarray(n, dtype=float))
        lon, lat = utm_to_geodetic(e, n, self.zone, self.north)
        return geodetic_to_ecef_array(lon, lat, self.height(e, n))

    def raster(self, bounds: Tuple[float, float, float, float], cell: float) -> RasterGrid:
        """Analytic heights at the cell centers of a north-up UTM grid."""
        e_min, n_min, e_max, n_max = bounds
        width = int(math.ceil((e_max - e_min) / cell))
        height = int(math.ceil((n_max - n_min) / cell))
        grid = RasterGrid(np.zeros((height, width)), (e_min, cell, 0.0, n_max, 0.0, -cell),
                          crs=f"EPSG:{utm_epsg(self.zone, self.north)}")
        e, n = grid.cell_centers()
        return grid.with_values(self.height(e, n))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "zone": self.zone,
            "north": self.north,
            "origin": [self.origin_e, self.origin_n],
            "base_height": self.base_height,
            "hills": self.hills.tolist(),
        }


@dataclass(frozen=True, eq=False)
class Texture:
    """Band-limited value noise over UTM coordinates, one cubic-spline lattice per octave."""
    e_min: float
    n_min: float
    spacing: float
    coefficients: Tuple[np.ndarray, ...]
    weights: Tuple[float, ...]
    scale: float

    def raw(self, e, n) -> np.ndarray:
        e = np.asarray(e, dtype=float)
        n = np.asarray(n, dtype=float)
        total = np.zeros(np.broadcast(e, n).shape)
        for octave, (coeff, weight) in enumerate(zip(self.coefficients, self.weights)):
            step = self.spacing * (2 ** octave)
            coords = np.stack([((n - self.n_min) / step).ravel(), ((e - self.e_min) / step).ravel()])
            values = ndimage.map_coordinates(coeff, coords, order=3, mode="mirror", prefilter=False)
            total = total + weight * values.reshape(total.shape)
        return total

    def intensity(self, e, n) -> np.ndarray:
        return np.clip(INTENSITY_MEAN + INTENSITY_SPREAD * self.raw(e, n) / self.scale, 0.0, 255.0)


def make_texture(bounds: Tuple[float, float, float, float], spacing: float, seed: int) -> Texture:
    e_min, n_min, e_max, n_max = bounds
    coefficients, weights = [], []
    for octave in range(TEXTURE_OCTAVES):
        step = spacing * (2 ** octave)
        rows = int(math.ceil((n_max - n_min) / step)) + 4
        cols = int(math.ceil((e_max - e_min) / step)) + 4
        rng = np.random.default_rng(derived_seed(seed, "texture", str(octave)))
        lattice = rng.standard_normal((rows, cols))
        coefficients.append(ndimage.spline_filter(lattice, order=3, mode="mirror"))
        weights.append(0.6 ** octave)
    # cubic interpolation of unit white noise has std ~0.6; normalize the weighted sum
    scale = 0.6 * math.sqrt(sum(w * w for w in weights))
    return Texture(e_min, n_min, spacing, tuple(coefficients), tuple(weights), scale)


# ---------------------------------------------------------------------------
# Scene
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SyntheticScene:
    options: SynthOptions
    seed: int
    cameras: Tuple[PanoramicCamera, PanoramicCamera]
    terrain: Terrain
    texture: Optional[Texture]
    pitch_um: float
    bounds: Tuple[float, float, float, float]

    @property
    def fore(self) -> PanoramicCamera:
        return self.cameras[0]

    @property
    def aft(self) -> PanoramicCamera:
        return self.cameras[1]

    @property
    def image_size(self) -> Tuple[int, int]:
        return film_dimensions_px(self.fore, self.pitch_um)

    def center_ground(self) -> np.ndarray:
        return self.terrain.ground_points(self.terrain.origin_e, self.terrain.origin_n)[0]

    def mid_scan_positions(self) -> np.ndarray:
        return np.array([c.position0 + 0.5 * c.position_rate for c in self.cameras])

    def convergence_angle(self) -> float:
        """Angle (rad) between the two mid-scan rays to the scene center."""
        ground = self.center_ground()
        a, b = self.mid_scan_positions() - ground
        cos = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        return float(np.arccos(np.clip(cos, -1.0, 1.0)))

    def base_to_height(self) -> float:
        positions = self.mid_scan_positions()
        base = float(np.linalg.norm(positions[1] - positions[0]))
        ground = self.center_ground()
        up = enu_rotation(self.fore.frame_lon, self.fore.frame_lat)[2]
        height = float(np.mean((positions - ground) @ up))
        return base / height

    def ground_sample_distance(self) -> float:
        return self.pitch_um * 1e-3 / self.fore.f_mm * self.options.altitude_m


def _film_extents(options: SynthOptions) -> Tuple[float, float]:
    if options.full_extent:
        return KH4_FILM_HALF_LENGTH_MM, KH4_FILM_HALF_WIDTH_MM
    pitch_mm = options.pitch_um / 1000.0
    return options.width * pitch_mm / 2.0, options.height * pitch_mm / 2.0


def make_stereo_scene(options: Optional[SynthOptions] = None, seed: int = 42) -> SyntheticScene:
    """
    Build a fore/aft pair looking at a common center with the configured
    convergence angle from the configured altitude.

    Both cameras are placed so that their mid-scan (t = 0.5) positions sit
    H tan(angle/2) south (fore) and north (aft) of the center, giving
    B/H = 2 tan(angle/2). Truth rates model along-track motion during the
    scan and small attitude drifts, scaled to the film fraction in desk mode.
    """
    options = options or SynthOptions()
    half_length, half_width = _film_extents(options)
    film_fraction = half_length / KH4_FILM_HALF_LENGTH_MM

    zone = utm_zone_for(options.center_lon)
    north = options.center_lat >= 0.0
    e0, n0 = (float(v) for v in geodetic_to_utm(options.center_lon, options.center_lat, zone, north))

    rng = np.random.default_rng(derived_seed(seed, "terrain"))
    extent_e = options.altitude_m * half_length / KH4_FOCAL_LENGTH_MM if not options.full_extent \
        else options.altitude_m * math.tan(half_length / KH4_FOCAL_LENGTH_MM)
    extent_n = options.altitude_m * half_width / KH4_FOCAL_LENGTH_MM
    hills = []
    for _ in range(options.hills):
        sigma = rng.uniform(0.12, 0.25) * min(extent_e, extent_n) * 2.0
        amp = rng.uniform(0.4, 1.0) * options.relief_m * rng.choice([-1.0, 1.0], p=[0.25, 0.75])
        hills.append((rng.uniform(-0.8, 0.8) * extent_e, rng.uniform(-0.8, 0.8) * extent_n, amp, sigma))
    terrain = Terrain(zone, north, e0, n0, options.base_height_m, np.array(hills, dtype=float).reshape(-1, 4))

    center = terrain.ground_points(e0, n0)[0]
    lon_c, lat_c = options.center_lon, options.center_lat
    to_ecef = enu_rotation(lon_c, lat_c).T
    half_angle = options.stereo_angle / 2.0

    if options.truth_rates:
        motion = expected_along_track_motion(ORBIT_VELOCITY_M_S, SCAN_DURATION_S) * film_fraction
        attitude_rates = np.array([0.0, 2e-5, -1e-5]) * film_fraction
        imc = expected_imc(ORBIT_VELOCITY_M_S, options.altitude_m, SCAN_RATE_RAD_S) if options.full_extent else 0.0
    else:
        motion, attitude_rates, imc = 0.0, np.zeros(3), 0.0
    rate = to_ecef @ np.array([0.0, motion, 0.0])

    cameras = []
    for look, sign in (("fore", -1.0), ("aft", 1.0)):
        omega0 = sign * half_angle
        mid = center + to_ecef @ np.array([0.0, options.altitude_m * math.tan(omega0), options.altitude_m])
        p0 = mid - 0.5 * rate
        cameras.append(PanoramicCamera(
            X0=float(p0[0]), Y0=float(p0[1]), Z0=float(p0[2]),
            X01=float(rate[0]), Y01=float(rate[1]), Z01=float(rate[2]),
            omega0=omega0,
            phi0=0.0,
            kappa0=0.0,
            omega01=float(attitude_rates[0]),
            phi01=float(attitude_rates[1]),
            kappa01=float(attitude_rates[2]),
            imc=float(imc),
            f_mm=KH4_FOCAL_LENGTH_MM,
            film_half_length_mm=half_length,
            film_half_width_mm=half_width,
            frame_lon=lon_c,
            frame_lat=lat_c,
            image_id=look,
            metadata={"look": look, "mission": "synthetic", "seed": seed},
        ))

    margin = 0.25 * max(extent_e, extent_n) + 500.0
    bounds = (e0 - extent_e - margin, n0 - extent_n - margin, e0 + extent_e + margin, n0 + extent_n + margin)
    texture = None if options.full_extent else make_texture(bounds, options.texture_scale_m, seed)
    scene = SyntheticScene(options, seed, (cameras[0], cameras[1]), terrain, texture, options.pitch_um, bounds)
    logger.info(
        f"Synthetic scene (seed {seed}): convergence {math.degrees(scene.convergence_angle()):.3f} deg, "
        f"B/H {scene.base_to_height():.4f}, {len(hills)} hills, image {scene.image_size[0]}x{scene.image_size[1]} px"
    )
    return scene


# ---------------------------------------------------------------------------
# Ray / terrain geometry
# ---------------------------------------------------------------------------

def ray_terrain_intersection(terrain: Terrain, origins: np.ndarray, directions: np.ndarray,
                             tolerance: float = 1e-7, max_iterations: int = 50) -> Tuple[np.ndarray, np.ndarray]:
    """
    First intersection of rays with the terrain surface.

    Newton steps along each ray on g(s) = h_geodetic(s) - h_terrain(s), using
    dh_geodetic/ds = direction . up.

    Returns:
        (ECEF points (n, 3), UTM E/N/h (n, 3)); NaN rows where a ray misses
    """
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    start = intersect_ellipsoid_height(origins, directions, terrain.base_height)
    s = np.linalg.norm(start - origins, axis=1)
    for _ in range(max_iterations):
        points = origins + s[:, None] * directions
        llh = ecef_to_geodetic_array(points)
        e, n = geodetic_to_utm(llh[:, 0], llh[:, 1], terrain.zone, terrain.north)
        g = llh[:, 2] - terrain.height(e, n)
        lon, lat = np.radians(llh[:, 0]), np.radians(llh[:, 1])
        up = np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
        rate = np.einsum("ni,ni->n", directions, up)
        ds = -g / rate
        s = s + ds
        if np.nanmax(np.abs(ds), initial=0.0) < tolerance:
            break
    points = origins + s[:, None] * directions
    llh = ecef_to_geodetic_array(points)
    e, n = geodetic_to_utm(llh[:, 0], llh[:, 1], terrain.zone, terrain.north)
    return points, np.column_stack([e, n, llh[:, 2]])


def image_ground(scene: SyntheticScene, camera: PanoramicCamera, cols: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Terrain points seen at continuous pixel coordinates (col, row)."""
    w, h = film_dimensions_px(camera, scene.pitch_um)
    xy = pixel_to_mm(np.ravel(cols), np.ravel(rows), scene.pitch_um, w, h)
    origins, directions = backproject_rays(camera, xy)
    return ray_terrain_intersection(scene.terrain, origins, directions)


def ground_to_pixels(scene: SyntheticScene, camera: PanoramicCamera, ground: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Project ECEF points to (n, 2) continuous pixel coordinates; returns (pixels, inside & ok)."""
    w, h = film_dimensions_px(camera, scene.pitch_um)
    xy, ok = project_with_status(camera, ground)
    cols, rows, inside = mm_to_pixel(np.nan_to_num(xy), scene.pitch_um, w, h)
    return np.column_stack([cols, rows]), ok & inside


# ---------------------------------------------------------------------------
# Distortions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BendingWarp:
    """Film bending: image content displaced along rows by A sin(2 pi col / P + phase)."""
    amplitude_px: float
    period_px: float
    phase: float = 0.0

    def shift(self, cols) -> np.ndarray:
        return self.amplitude_px * np.sin(2.0 * math.pi * np.asarray(cols, dtype=float) / self.period_px + self.phase)

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.array(pixels, dtype=float, copy=True)
        pixels[:, 1] += self.shift(pixels[:, 0])
        return pixels


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_image(scene: SyntheticScene, camera: PanoramicCamera, warp: Optional[BendingWarp] = None,
                 step: int = RENDER_STEP_PX, jobs: int = 1, block_rows: int = 256) -> np.ndarray:
    """
    Render a camera's view by inverse projection sampling of the texture.

    Ground coordinates are traced exactly on a grid every `step` pixels and
    interpolated bilinearly in between; the texture is then sampled at the
    interpolated ground positions.
    """
    if scene.texture is None:
        raise ValueError("Full-extent scenes have no texture to render")
    w, h = film_dimensions_px(camera, scene.pitch_um)
    node_cols = np.arange(0, w + step, step, dtype=float)
    node_rows = np.arange(0, h + step, step, dtype=float)
    nc, nr = np.meshgrid(node_cols, node_rows)
    _, enh = image_ground(scene, camera, nc.ravel(), nr.ravel())
    e_nodes = enh[:, 0].reshape(nc.shape)
    n_nodes = enh[:, 1].reshape(nc.shape)

    def render_block(r0: int) -> np.ndarray:
        r1 = min(h, r0 + block_rows)
        rows, cols = np.mgrid[r0:r1, 0:w]
        cc = cols + 0.5
        rr = rows + 0.5
        if warp is not None:
            rr = rr - warp.shift(cc)
        coords = np.stack([rr.ravel() / step, cc.ravel() / step])
        e = ndimage.map_coordinates(e_nodes, coords, order=1, mode="nearest")
        n = ndimage.map_coordinates(n_nodes, coords, order=1, mode="nearest")
        return scene.texture.intensity(e, n).reshape(rr.shape)

    blocks = parallel_map(render_block, range(0, h, block_rows), jobs)
    image = np.vstack(blocks)
    logger.info(f"Rendered '{camera.image_id}' ({w}x{h} px)")
    return image


def render_orthoimage(scene: SyntheticScene, cell: Optional[float] = None) -> RasterGrid:
    """North-up UTM orthoimage of the texture over the scene bounds."""
    cell = cell or max(0.5, round(scene.ground_sample_distance() * 2.0) / 2.0)
    grid = scene.terrain.raster(scene.bounds, cell)
    e, n = grid.cell_centers()
    return grid.with_values(scene.texture.intensity(e, n))


def render_film(image: np.ndarray, clip_px: int, warp: Optional[BendingWarp] = None,
                stripes: bool = True, rail_holes: bool = True) -> np.ndarray:
    """
    Embed an image in a film strip: `clip_px` extra columns at both ends,
    bright PG stripe bands along the top and bottom edges separated from the
    image by a dark gap, rail holes in the top band, then the bending warp.
    """
    h, w = image.shape
    film = np.pad(np.asarray(image, dtype=float), ((0, 0), (clip_px, clip_px)), mode="reflect")
    width = film.shape[1]
    if stripes:
        film[:STRIPE_BAND_PX, :] = STRIPE_BRIGHT
        film[STRIPE_BAND_PX:STRIPE_BAND_PX + STRIPE_GAP_PX, :] = STRIPE_DARK
        film[h - STRIPE_BAND_PX - STRIPE_GAP_PX:h - STRIPE_BAND_PX, :] = STRIPE_DARK
        film[h - STRIPE_BAND_PX:, :] = STRIPE_BRIGHT
    if stripes and rail_holes:
        rows, cols = np.mgrid[0:STRIPE_BAND_PX, 0:width]
        for c in range(RAIL_HOLE_PERIOD_PX // 2, width, RAIL_HOLE_PERIOD_PX):
            hole = (cols + 0.5 - c) ** 2 + (rows + 0.5 - STRIPE_BAND_PX / 2.0) ** 2 <= RAIL_HOLE_RADIUS_PX ** 2
            film[:STRIPE_BAND_PX][hole] = STRIPE_DARK
    if warp is not None:
        rows, cols = np.mgrid[0:h, 0:width].astype(float)
        # film column c corresponds to image column c - clip_px
        src_rows = rows - warp.shift(cols + 0.5 - clip_px)
        film = ndimage.map_coordinates(film, [src_rows, cols], order=1, mode="nearest")
    return film


def split_film(film: np.ndarray, overlap: int, transforms: Sequence[Rigid2D]) -> List[ScanPart]:
    """
    Cut a film into four overlapping scan parts a-d. Part k is resampled so
    that part pixel p maps to film pixel transforms[k].apply(p) + (x_k, 0),
    where x_k is the part's nominal start column.
    """
    if len(transforms) != 4:
        raise ValueError("split_film needs four transforms")
    h, w = film.shape
    step = (w + 3 * overlap) // 4
    parts = []
    for k, (label, transform) in enumerate(zip("abcd", transforms)):
        x0 = k * (step - overlap)
        width = step if k < 3 else w - x0
        rows, cols = np.mgrid[0:h, 0:width].astype(float)
        mapped = transform.apply(np.column_stack([cols.ravel() + 0.5, rows.ravel() + 0.5]))
        values = ndimage.map_coordinates(
            film, [mapped[:, 1] - 0.5, mapped[:, 0] - 0.5 + x0], order=1, mode="nearest"
        ).reshape(h, width)
        parts.append(ScanPart(label, RasterGrid(values, (float(x0), 1.0, 0.0, 0.0, 0.0, 1.0))))
    return parts


# ---------------------------------------------------------------------------
# Observations
# ---------------------------------------------------------------------------

@dataclass
class SyntheticObservations:
    images: Dict[str, Optional[np.ndarray]]
    gcps: List[GcpRecord]
    tiepoints: List[TiePoint]
    truth: Dict[str, Any]


def _sample_common_points(scene: SyntheticScene, count: int, seed: int, label: str,
                          inner: float = 0.9) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ground points visible in both images: (ECEF (n,3), fore pixels, aft pixels)."""
    rng = np.random.default_rng(derived_seed(seed, label))
    w, h = scene.image_size
    ground_all, fore_all, aft_all = [], [], []
    found = 0
    for _ in range(20):
        if found >= count:
            break
        n_try = max(4 * (count - found), 16)
        cols = rng.uniform((1 - inner) / 2 * w, (1 + inner) / 2 * w, n_try)
        rows = rng.uniform((1 - inner) / 2 * h, (1 + inner) / 2 * h, n_try)
        ground, _ = image_ground(scene, scene.fore, cols, rows)
        good = np.all(np.isfinite(ground), axis=1)
        ground = ground[good]
        fore_px, fore_ok = ground_to_pixels(scene, scene.fore, ground)
        aft_px, aft_ok = ground_to_pixels(scene, scene.aft, ground)
        margin = 0.02 * np.array([w, h])
        inside_aft = aft_ok & np.all((aft_px > margin) & (aft_px < np.array([w, h]) - margin), axis=1)
        keep = fore_ok & inside_aft
        ground_all.append(ground[keep])
        fore_all.append(fore_px[keep])
        aft_all.append(aft_px[keep])
        found += int(keep.sum())
    ground = np.vstack(ground_all)[:count]
    if len(ground) < count:
        logger.warning(f"Only {len(ground)} of {count} {label} points are visible in both images")
    return ground, np.vstack(fore_all)[:count], np.vstack(aft_all)[:count]


def render_observations(scene: SyntheticScene,
                        noise_px: float = 0.0,
                        warp: Optional[BendingWarp] = None,
                        n_gcps: Optional[int] = None,
                        n_ties: Optional[int] = None,
                        check_fraction: float = 0.5,
                        render: bool = True,
                        jobs: int = 1) -> SyntheticObservations:
    """
    Observations of a scene: images (desk scale only), GCP records in both
    images sharing a gcp_id, and tie points, all with optional Gaussian pixel
    noise and bending warp. GCP roles are split control/check per pair.
    """
    n_gcps = scene.options.gcps if n_gcps is None else n_gcps
    n_ties = scene.options.ties if n_ties is None else n_ties
    seed = scene.seed
    noise_rng = np.random.default_rng(derived_seed(seed, "noise", f"{noise_px:.6g}"))

    def observe(pixels: np.ndarray) -> np.ndarray:
        out = pixels + (noise_rng.normal(0.0, noise_px, pixels.shape) if noise_px > 0 else 0.0)
        return warp.apply(out) if warp is not None else out

    gcp_ground, gcp_fore, gcp_aft = _sample_common_points(scene, n_gcps, seed, "gcps")
    tie_ground, tie_fore, tie_aft = _sample_common_points(scene, n_ties, seed, "ties")
    fore_obs, aft_obs = observe(gcp_fore), observe(gcp_aft)
    tie_fore_obs, tie_aft_obs = observe(tie_fore), observe(tie_aft)

    order = np.random.default_rng(derived_seed(seed, "split")).permutation(len(gcp_ground))
    n_check = int(round(check_fraction * len(gcp_ground)))
    check = set(order[:n_check].tolist())

    gcps: List[GcpRecord] = []
    for i, ground in enumerate(gcp_ground):
        role = "check" if i in check else "control"
        for camera, obs in ((scene.fore, fore_obs), (scene.aft, aft_obs)):
            gcps.append(GcpRecord(
                image_id=camera.image_id,
                pixel=PixelPoint(float(obs[i, 0]), float(obs[i, 1])),
                ground=EcefPoint.from_array(ground),
                role=role,
                gcp_id=f"G{i:04d}",
            ))
    ties = [
        TiePoint(
            f"T{k:04d}",
            [(scene.fore.image_id, PixelPoint(float(tie_fore_obs[k, 0]), float(tie_fore_obs[k, 1]))),
             (scene.aft.image_id, PixelPoint(float(tie_aft_obs[k, 0]), float(tie_aft_obs[k, 1])))],
        )
        for k in range(len(tie_ground))
    ]

    images: Dict[str, Optional[np.ndarray]] = {c.image_id: None for c in scene.cameras}
    if render and scene.texture is not None:
        for camera in scene.cameras:
            images[camera.image_id] = render_image(scene, camera, warp=warp, jobs=jobs)

    truth = {
        "seed": seed,
        "cameras": {c.image_id: camera_to_dict(c, scene.pitch_um) for c in scene.cameras},
        "terrain": scene.terrain.to_dict(),
        "gcp_ground": gcp_ground.tolist(),
        "tie_ground": tie_ground.tolist(),
        "gcp_pixels": {"fore": gcp_fore.tolist(), "aft": gcp_aft.tolist()},
        "tie_pixels": {"fore": tie_fore.tolist(), "aft": tie_aft.tolist()},
        "noise_px": noise_px,
        "warp": None if warp is None else {"amplitude_px": warp.amplitude_px, "period_px": warp.period_px,
                                            "phase": warp.phase},
    }
    logger.info(f"Synthetic observations: {len(gcps)} GCP records, {len(ties)} tie points, noise {noise_px} px")
    return SyntheticObservations(images, gcps, ties, truth)


def perturb_camera(camera: PanoramicCamera, seed: int, position_m: float = 5000.0,
                   angle_rad: float = math.radians(1.0), rate_fraction: float = 0.2) -> PanoramicCamera:
    """Truth camera with uniform random errors on positions, angles and rates."""
    rng = np.random.default_rng(derived_seed(seed, "perturb", camera.image_id))
    p = camera.parameters()
    p[0:3] += rng.uniform(-position_m, position_m, 3)
    p[6:9] += rng.uniform(-angle_rad, angle_rad, 3)
    rates = np.r_[p[3:6], p[9:12]]
    rates *= 1.0 + rng.uniform(-rate_fraction, rate_fraction, 6)
    p[3:6], p[9:12] = rates[:3], rates[3:]
    return camera.with_parameters(p)


def write_truth(filepath: Union[str, Path], truth: Dict[str, Any]) -> None:
    """Truth sidecar; never read by pipeline stages."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(truth, f, indent=2, sort_keys=True)
    logger.info(f"Wrote truth sidecar '{filepath}'")


# ---------------------------------------------------------------------------
# On-disk dataset
# ---------------------------------------------------------------------------

def scene_warp(options: SynthOptions) -> Optional[BendingWarp]:
    if options.bending_amplitude_px <= 0:
        return None
    return BendingWarp(options.bending_amplitude_px, options.bending_period_px)


def reference_dem(scene: SyntheticScene, cell: Optional[float] = None,
                  offset: Sequence[float] = ()) -> RasterGrid:
    """Analytic terrain on a UTM grid, optionally displaced by (dE, dN[, dh]) meters."""
    cell = cell or scene.options.reference_cell_m
    grid = scene.terrain.raster(scene.bounds, cell)
    if not offset:
        return grid
    shift = list(offset) + [0.0] * (3 - len(offset))
    e, n = grid.cell_centers()
    return grid.with_values(scene.terrain.height(e - shift[0], n - shift[1]) + shift[2])


def write_dataset(scene: SyntheticScene, out_dir: Union[str, Path], clip_px: int, jobs: int = 1) -> Dict[str, Path]:
    """
    Write everything a hermetic run reads: one film strip per image (aft
    strips stored as scanned, rotated by 180 degrees), the observation CSV,
    reference DEM and orthoimage, approximate footprints, plus the truth DEM
    and truth sidecar that only the report compares against.
    """
    from .gcpgen import footprint_from_camera, save_footprints, shift_footprint
    from .observations import write_observations
    from .raster import write_raster

    out_dir = Path(out_dir)
    options = scene.options
    warp = scene_warp(options)
    observations = render_observations(scene, noise_px=options.noise_px, warp=warp, render=False, jobs=jobs)
    paths: Dict[str, Path] = {}

    if scene.texture is not None:
        for camera in scene.cameras:
            image = render_image(scene, camera, jobs=jobs)
            film = render_film(image, clip_px, warp)
            if camera.metadata.get("look") == "aft":
                film = np.rot90(film, 2)
            paths[f"scan_{camera.image_id}"] = write_raster(
                RasterGrid(np.ascontiguousarray(film)), out_dir / "scans" / f"{camera.image_id}.bin"
            )
        paths["reference_image"] = write_raster(render_orthoimage(scene), out_dir / "reference_ortho.tif")

    paths["observations"] = out_dir / "observations.csv"
    write_observations(paths["observations"], observations.gcps, observations.tiepoints)
    paths["reference_dem"] = write_raster(reference_dem(scene, offset=options.reference_offset_m),
                                          out_dir / "reference_dem.tif")
    paths["truth_dem"] = write_raster(reference_dem(scene), out_dir / "truth_dem.tif")

    offset = list(options.footprint_offset_m) + [0.0] * (2 - len(options.footprint_offset_m))
    footprints = {
        c.image_id: shift_footprint(
            footprint_from_camera(c, scene.pitch_um, scene.terrain.base_height, options.footprint_uncertainty_km),
            offset[0], offset[1],
        )
        for c in scene.cameras
    }
    paths["footprints"] = out_dir / "footprints.json"
    save_footprints(paths["footprints"], footprints)

    truth = dict(observations.truth)
    truth["clip_px"] = clip_px
    paths["truth"] = out_dir / "truth.json"
    write_truth(paths["truth"], truth)
    logger.info(f"Synthetic dataset written to '{out_dir}'")
    return paths
