"""
Surface reconstruction: intersection of dense correspondences, DEM gridding,
tile-wise 3D affine coregistration to a reference DEM and elevation
difference statistics.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from .camera import PanoramicCamera, _orientation, backproject_rays, imc_shift, scan_time
from .errors import DisjointGrids, DivergentPoint, NearParallelRays, NoStableTerrain, TileUnderconstrained
from .geodesy import ecef_to_utm, nmad, utm_epsg
from .models import Affine3D, DhReport, EcefPoint, ImagePointMM
from .raster import RasterGrid, bilinear
from .utils import parallel_map

logger = logging.getLogger(__name__)

PARALLEL_CONDITION_LIMIT = 1e6
DEFAULT_MAX_MISS_M = 100.0
MAX_LINEAR_DEVIATION = 0.05
TILE_CONDITION_LIMIT = 1e10


# ---------------------------------------------------------------------------
# Triangulation
# ---------------------------------------------------------------------------

def _observation_rows(camera: PanoramicCamera, xy_mm: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two linear equations a . X = a . P(t) per image point, from the
    collinearity condition evaluated at the point's exposure time.
    Returns rows (n, 2, 3) normalized to unit length and right sides (n, 2).
    """
    f = camera.f_mm
    alpha = xy_mm[:, 0] / f
    t = scan_time(xy_mm[:, 0], camera)
    positions, rotations, _ = _orientation(camera, t)
    r1, r2, r3 = rotations[:, 0, :], rotations[:, 1, :], rotations[:, 2, :]
    y_total = xy_mm[:, 1] + imc_shift(camera, alpha)
    row_x = r1 + np.tan(alpha)[:, None] * r3
    row_y = r2 + (y_total / (f * np.cos(alpha)))[:, None] * r3
    rows = np.stack([row_x, row_y], axis=1)
    rows /= np.linalg.norm(rows, axis=2, keepdims=True)
    rhs = np.einsum("nki,ni->nk", rows, positions)
    return rows, rhs


def _miss_distance(cam_a: PanoramicCamera, cam_b: PanoramicCamera,
                   xy_a: np.ndarray, xy_b: np.ndarray) -> np.ndarray:
    """Closest-approach distance between the two image rays."""
    oa, da = backproject_rays(cam_a, xy_a)
    ob, db = backproject_rays(cam_b, xy_b)
    normal = np.cross(da, db)
    norm = np.linalg.norm(normal, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.abs(np.einsum("ni,ni->n", ob - oa, normal)) / norm


def triangulate_points(cam_a: PanoramicCamera, cam_b: PanoramicCamera,
                       xy_a: np.ndarray, xy_b: np.ndarray,
                       condition_limit: float = PARALLEL_CONDITION_LIMIT) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Batched two-ray intersection.

    Returns:
        points (n, 3) ECEF, closest-approach distances (n,) in meters and an
        ok mask that is False for near-parallel rays
    """
    xy_a = np.atleast_2d(np.asarray(xy_a, dtype=float))
    xy_b = np.atleast_2d(np.asarray(xy_b, dtype=float))
    rows_a, rhs_a = _observation_rows(cam_a, xy_a)
    rows_b, rhs_b = _observation_rows(cam_b, xy_b)
    design = np.concatenate([rows_a, rows_b], axis=1)
    rhs = np.concatenate([rhs_a, rhs_b], axis=1)
    singular = np.linalg.svd(design, compute_uv=False)
    with np.errstate(divide="ignore"):
        condition = singular[:, 0] / singular[:, -1]
    ok = np.isfinite(condition) & (condition < condition_limit)
    points = np.full((len(xy_a), 3), np.nan)
    if ok.any():
        normal = np.einsum("nki,nkj->nij", design[ok], design[ok])
        rhs_n = np.einsum("nki,nk->ni", design[ok], rhs[ok])
        points[ok] = np.linalg.solve(normal, rhs_n[..., None])[..., 0]
    return points, _miss_distance(cam_a, cam_b, xy_a, xy_b), ok


def triangulate(cam_a: PanoramicCamera, cam_b: PanoramicCamera, point_a: ImagePointMM, point_b: ImagePointMM,
                max_miss_m: float = DEFAULT_MAX_MISS_M,
                condition_limit: float = PARALLEL_CONDITION_LIMIT) -> Tuple[EcefPoint, float]:
    """
    Intersect one correspondence by least squares on the four collinearity rows.

    Returns:
        (ground point, closest-approach distance in meters)

    Raises:
        NearParallelRays: If the 4x3 system is too poorly conditioned
        DivergentPoint: If the rays pass farther apart than max_miss_m
    """
    points, miss, ok = triangulate_points(
        cam_a, cam_b, [[point_a.x_p, point_a.y_p]], [[point_b.x_p, point_b.y_p]], condition_limit
    )
    if not ok[0]:
        raise NearParallelRays("Rays are parallel or nearly so")
    if miss[0] > max_miss_m:
        raise DivergentPoint(f"Rays pass {miss[0]:.1f} m apart (limit {max_miss_m} m)")
    return EcefPoint.from_array(points[0]), float(miss[0])


def expected_miss_distance(camera: PanoramicCamera, points: np.ndarray, pitch_um: float) -> np.ndarray:
    """Ground footprint of one pixel at each point's range from the camera."""
    center = camera.position0 + 0.5 * camera.position_rate
    ranges = np.linalg.norm(np.atleast_2d(points) - center, axis=1)
    return ranges * (pitch_um / 1000.0) / camera.f_mm


def filter_points(points: np.ndarray, miss: np.ndarray, camera: PanoramicCamera, pitch_um: float,
                  factor: float = 3.0) -> np.ndarray:
    """Mask of points whose closest approach is within factor x the one-pixel footprint."""
    expected = expected_miss_distance(camera, points, pitch_um)
    keep = np.all(np.isfinite(points), axis=1) & np.isfinite(miss) & (miss <= factor * expected)
    dropped = int((~keep).sum())
    if dropped:
        logger.info(f"Dropped {dropped} of {len(points)} points on closest-approach quality")
    return keep


# ---------------------------------------------------------------------------
# Gridding
# ---------------------------------------------------------------------------

def _grid_for(east: np.ndarray, north: np.ndarray, cell: float, crs: Optional[str]) -> RasterGrid:
    x0 = math.floor(east.min() / cell) * cell - cell
    x1 = math.ceil(east.max() / cell) * cell + cell
    y1 = math.ceil(north.max() / cell) * cell + cell
    y0 = math.floor(north.min() / cell) * cell - cell
    width = max(1, int(round((x1 - x0) / cell)))
    height = max(1, int(round((y1 - y0) / cell)))
    return RasterGrid(np.full((height, width), np.nan), (x0, cell, 0.0, y1, 0.0, -cell), crs=crs)


def grid_enh(enh: np.ndarray, cell: float, like: Optional[RasterGrid] = None, crs: Optional[str] = None) -> RasterGrid:
    """
    Robust gridding of (E, N, h) points: each cell takes the distance-weighted
    median of the points in itself and its 8 neighbours.
    """
    enh = np.atleast_2d(np.asarray(enh, dtype=float))
    enh = enh[np.all(np.isfinite(enh), axis=1)]
    if len(enh) == 0:
        raise ValueError("Cannot grid an empty point cloud")
    grid = like.with_values(np.full(like.values.shape, np.nan)) if like is not None else _grid_for(enh[:, 0], enh[:, 1], cell, crs)
    h, w = grid.values.shape
    cols, rows = grid.map_to_pixel(enh[:, 0], enh[:, 1])
    ci = np.floor(cols).astype(np.int64)
    ri = np.floor(rows).astype(np.int64)
    size = abs(grid.geotransform[1])

    cell_ids, values, weights = [], [], []
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = ri + dr, ci + dc
            inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            cx, cy = grid.pixel_to_map(c[inside] + 0.5, r[inside] + 0.5)
            distance = np.hypot(enh[inside, 0] - cx, enh[inside, 1] - cy)
            cell_ids.append(r[inside] * w + c[inside])
            values.append(enh[inside, 2])
            weights.append(1.0 / (1.0 + distance / size))
    cell_ids = np.concatenate(cell_ids)
    values = np.concatenate(values)
    weights = np.concatenate(weights)

    order = np.lexsort((weights, values, cell_ids))
    cell_ids, values, weights = cell_ids[order], values[order], weights[order]
    starts = np.flatnonzero(np.r_[True, cell_ids[1:] != cell_ids[:-1]])
    totals = np.add.reduceat(weights, starts)
    cumulative = np.cumsum(weights)
    before = np.r_[0.0, cumulative[starts[1:] - 1]]
    group = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(cell_ids)]))
    within = cumulative - before[group]
    reached = within >= 0.5 * totals[group] - 1e-12
    # first entry per group at or past half the total weight
    first = np.full(len(starts), -1)
    idx = np.flatnonzero(reached)
    first_group = group[idx]
    _, pick = np.unique(first_group, return_index=True)
    first[first_group[pick]] = idx[pick]

    out = np.full(h * w, np.nan)
    out[cell_ids[starts]] = values[first]
    return grid.with_values(out.reshape(h, w))


def grid_dem(points: np.ndarray, zone: int, north: bool = True, cell: float = 10.0,
             like: Optional[RasterGrid] = None) -> RasterGrid:
    """ECEF point cloud -> UTM DEM of ellipsoidal heights; empty cells stay NaN."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    points = points[np.all(np.isfinite(points), axis=1)]
    if len(points) == 0:
        raise ValueError("Cannot grid an empty point cloud")
    enh = ecef_to_utm(points, zone, north)
    dem = grid_enh(enh, cell, like=like, crs=f"EPSG:{utm_epsg(zone, north)}")
    logger.info(
        f"Gridded {len(points)} points into {dem.width}x{dem.height} cells of {cell:g} m "
        f"({np.isfinite(dem.values).mean():.1%} filled)"
    )
    return dem


# ---------------------------------------------------------------------------
# Elevation differences
# ---------------------------------------------------------------------------

def _check_grids(dem: RasterGrid, reference: RasterGrid) -> None:
    if not dem.same_grid(reference, tol=1e-6):
        raise DisjointGrids(
            f"DEM grid {dem.values.shape} {dem.geotransform} differs from reference "
            f"{reference.values.shape} {reference.geotransform}"
        )


def elevation_difference(dem: RasterGrid, reference: RasterGrid) -> RasterGrid:
    _check_grids(dem, reference)
    return dem.with_values(dem.values - reference.values)


def dh_stats(dem: RasterGrid, reference: RasterGrid, mask: Optional[np.ndarray] = None,
             stable_mask: str = "") -> DhReport:
    """
    NMAD and median of dem - reference over the mask, raw and after
    discarding cells beyond 3 NMAD of the median.

    Raises:
        DisjointGrids: If the rasters do not share a grid
    """
    dh = elevation_difference(dem, reference).values
    mask = np.ones(dh.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != dh.shape:
        raise DisjointGrids(f"Mask shape {mask.shape} differs from grid {dh.shape}")
    values = dh[mask & np.isfinite(dh)]
    total = int(mask.sum())
    fraction = len(values) / total if total else 0.0
    if len(values) < 2:
        logger.warning(f"Only {len(values)} valid difference cells under the mask")
        median = float(values[0]) if len(values) else float("nan")
        return DhReport(0.0, median, fraction, len(values), 0.0, median, stable_mask=stable_mask)
    spread = nmad(values)
    median = float(np.median(values))
    kept = values[np.abs(values - median) <= 3.0 * spread] if spread > 0 else values
    return DhReport(
        nmad=spread,
        median=median,
        valid_fraction=fraction,
        count=len(values),
        nmad_filtered=nmad(kept) if len(kept) >= 2 else spread,
        median_filtered=float(np.median(kept)),
        stable_mask=stable_mask,
    )


def fill_gaps_hypsometric(dem: RasterGrid, reference: RasterGrid, mask: Optional[np.ndarray] = None,
                          band_width: float = 50.0, outlier_nmad: float = 3.0) -> RasterGrid:
    """
    Remove outliers and fill gaps with the per-elevation-band median
    difference: within each reference-height band, cells farther than
    outlier_nmad NMADs from the band median are dropped, then empty cells get
    reference + band median (global median when a band has no data).
    """
    dh = elevation_difference(dem, reference).values.copy()
    ref = reference.values
    region = np.isfinite(ref) if mask is None else (np.asarray(mask, dtype=bool) & np.isfinite(ref))
    finite = np.isfinite(dh) & region
    if finite.sum() < 2:
        return dem
    global_median = float(np.median(dh[finite]))
    bands = np.floor(ref / band_width)
    out = dem.values.copy()
    filled = removed = 0
    for band in np.unique(bands[region]):
        in_band = region & (bands == band)
        samples = dh[in_band & np.isfinite(dh)]
        median = float(np.median(samples)) if len(samples) else global_median
        if len(samples) >= 2:
            spread = nmad(samples)
            outliers = in_band & np.isfinite(dh) & (np.abs(dh - median) > outlier_nmad * spread) & (spread > 0)
            out[outliers] = np.nan
            removed += int(outliers.sum())
            samples = dh[in_band & np.isfinite(out)]
            median = float(np.median(samples)) if len(samples) else global_median
        gaps = in_band & ~np.isfinite(out)
        out[gaps] = ref[gaps] + median
        filled += int(gaps.sum())
    logger.info(f"Hypsometric filling: removed {removed} outliers, filled {filled} cells")
    return dem.with_values(out)


# ---------------------------------------------------------------------------
# Coregistration
# ---------------------------------------------------------------------------

@dataclass
class TileTransform:
    """Affine correction of one coregistration tile (global map coordinates)."""
    tile_id: str
    bounds: Tuple[int, int, int, int]            # row0, row1, col0, col1
    center: np.ndarray
    transform: Affine3D = field(default_factory=Affine3D.identity)
    stable_fraction: float = 0.0
    nmad_before: float = float("nan")
    nmad_after: float = float("nan")
    iterations: int = 0
    inherited: bool = False
    reverted: bool = False

    @property
    def local_translation(self) -> np.ndarray:
        """Displacement the transform applies at the tile center."""
        return self.transform.apply(self.center)[0] - self.center

    def to_dict(self) -> Dict[str, Any]:
        return {
            "tile": self.tile_id,
            "bounds": list(self.bounds),
            "center": self.center.tolist(),
            **self.transform.to_dict(),
            "local_translation": self.local_translation.tolist(),
            "stable_fraction": self.stable_fraction,
            "nmad_before_m": self.nmad_before,
            "nmad_after_m": self.nmad_after,
            "iterations": self.iterations,
            "inherited": self.inherited,
            "reverted": self.reverted,
        }


def plan_coregistration_tiles(shape: Tuple[int, int], cell: float, tile_size_m: float,
                              overlap: float) -> List[Tuple[int, int, int, int]]:
    """Square tiles of tile_size_m with the given overlap fraction, as cell bounds."""
    h, w = shape
    size = max(1, int(round(tile_size_m / cell)))
    step = max(1, int(round(size * (1.0 - overlap))))

    def starts(length: int) -> List[int]:
        if length <= size:
            return [0]
        out = list(range(0, length - size, step))
        out.append(length - size)
        return sorted(set(out))

    return [(r, min(h, r + size), c, min(w, c + size)) for r in starts(h) for c in starts(w)]


def _reference_gradients(reference: RasterGrid) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, dx, _, _, _, dy = reference.geotransform
    d_row, d_col = np.gradient(reference.values)
    gx = d_col / dx
    gy = d_row / dy
    return gx, gy, np.arctan(np.hypot(gx, gy))


def _sample_index(values: np.ndarray, grid: RasterGrid, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    col, row = grid.map_to_pixel(x, y)
    return bilinear(values, col - 0.5, row - 0.5)


def _fit_tile(points: np.ndarray, reference: RasterGrid, gx: np.ndarray, gy: np.ndarray, slope: np.ndarray,
              center: np.ndarray, iterations: int, tolerance: float, dh_limit: float,
              slope_limit: float) -> Tuple[Affine3D, int]:
    """
    Gauss-Newton on e = ref(T(p)_xy) - T(p)_z over stable points, with T
    parameterized about the tile center. Raises TileUnderconstrained.
    """
    local = points - center
    params = np.zeros(12)
    used = 0
    for used in range(1, iterations + 1):
        transform = Affine3D.from_params(params)
        moved = transform.apply(local) + center
        ref_h = _sample_index(reference.values, reference, moved[:, 0], moved[:, 1])
        e = ref_h - moved[:, 2]
        g_x = _sample_index(gx, reference, moved[:, 0], moved[:, 1])
        g_y = _sample_index(gy, reference, moved[:, 0], moved[:, 1])
        s = _sample_index(slope, reference, moved[:, 0], moved[:, 1])
        ok = np.isfinite(e) & np.isfinite(g_x) & np.isfinite(g_y) & (np.abs(e) <= dh_limit) & (s <= slope_limit)
        if ok.sum() < 12:
            raise TileUnderconstrained(f"Only {int(ok.sum())} usable cells")
        p = local[ok]
        jac = np.zeros((int(ok.sum()), 12))
        jac[:, 0:3] = g_x[ok, None] * p
        jac[:, 3:6] = g_y[ok, None] * p
        jac[:, 6:9] = -p
        jac[:, 9] = g_x[ok]
        jac[:, 10] = g_y[ok]
        jac[:, 11] = -1.0
        norms = np.linalg.norm(jac, axis=0)
        norms[norms == 0] = 1.0
        scaled = jac / norms
        singular = np.linalg.svd(scaled, compute_uv=False)
        if singular[-1] == 0 or singular[0] / singular[-1] > TILE_CONDITION_LIMIT:
            raise TileUnderconstrained("Terrain does not constrain all 12 affine parameters")
        step, *_ = np.linalg.lstsq(scaled, -e[ok], rcond=None)
        step /= norms
        params += step
        # update measured as displacement over the tile extent
        extent = np.abs(local[ok]).max(axis=0)
        if np.max(np.abs(step[:9].reshape(3, 3) @ extent)) + np.max(np.abs(step[9:])) < tolerance:
            break
    local_transform = Affine3D.from_params(params)
    # T(p) = A (p - c) + c + t  ->  A p + (c + t - A c)
    return Affine3D(local_transform.matrix, center + local_transform.translation - local_transform.matrix @ center), used


def _tile_points(dem: RasterGrid, bounds: Tuple[int, int, int, int]) -> Tuple[np.ndarray, np.ndarray]:
    r0, r1, c0, c1 = bounds
    rows, cols = np.mgrid[r0:r1, c0:c1]
    x, y = dem.pixel_to_map(cols + 0.5, rows + 0.5)
    z = dem.values[r0:r1, c0:c1]
    return np.column_stack([x.ravel(), y.ravel(), z.ravel()]), (rows.ravel(), cols.ravel())


def _tile_nmad(points: np.ndarray, transform: Affine3D, reference: RasterGrid) -> float:
    moved = transform.apply(points)
    dh = moved[:, 2] - reference.sample(moved[:, 0], moved[:, 1])
    dh = dh[np.isfinite(dh)]
    return nmad(dh) if len(dh) >= 2 else float("nan")


def _feather_weights(shape: Tuple[int, int], bounds: Tuple[int, int, int, int], ramp: float) -> np.ndarray:
    """Tent weights: 1 in the tile interior, falling linearly to 0 over `ramp` cells at the tile edge."""
    h, w = shape
    r0, r1, c0, c1 = bounds
    ramp = max(ramp, 1e-9)

    def axis(lo: int, hi: int, length: int) -> np.ndarray:
        coords = np.arange(length) + 0.5
        # edges on the raster border do not fade
        from_lo = (coords - lo) / ramp if lo > 0 else np.full(length, np.inf)
        from_hi = (hi - coords) / ramp if hi < length else np.full(length, np.inf)
        return np.clip(np.minimum(from_lo, from_hi), 0.0, 1.0)

    return np.outer(axis(r0, r1, h), axis(c0, c1, w))


def blend_transforms(shape: Tuple[int, int], tiles: List[TileTransform], ramp: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-cell weighted average of the tile matrices and translations: (A (h,w,3,3), t (h,w,3), weight)."""
    h, w = shape
    matrix = np.zeros((h, w, 3, 3))
    translation = np.zeros((h, w, 3))
    total = np.zeros((h, w))
    for tile in tiles:
        weight = _feather_weights(shape, tile.bounds, ramp)
        matrix += weight[..., None, None] * tile.transform.matrix
        translation += weight[..., None] * tile.transform.translation
        total += weight
    safe = np.where(total > 0, total, 1.0)
    matrix /= safe[..., None, None]
    translation /= safe[..., None]
    matrix[total == 0] = np.eye(3)
    return matrix, translation, total


def apply_blended(dem: RasterGrid, matrix: np.ndarray, translation: np.ndarray, iterations: int = 3) -> RasterGrid:
    """
    Corrected heights on the same grid: for each cell, find the DEM position q
    whose transformed planimetric position lands on the cell, and take its
    transformed height.
    """
    x, y = dem.cell_centers()
    qx, qy = x.copy(), y.copy()

    def moved_at(qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
        z = dem.sample(qx, qy)
        z = np.where(np.isfinite(z), z, dem.values)
        p = np.stack([qx, qy, z], axis=-1)
        return np.einsum("hwij,hwj->hwi", matrix, p) + translation

    for _ in range(iterations):
        moved = moved_at(qx, qy)
        qx = qx - (moved[..., 0] - x)
        qy = qy - (moved[..., 1] - y)
    z_new = moved_at(qx, qy)[..., 2]
    return dem.with_values(np.where(np.isfinite(dem.values), z_new, np.nan))


def coregister_tiles(dem: RasterGrid, reference: RasterGrid, stable_mask: Optional[np.ndarray] = None,
                     tile_size_m: float = 20000.0, overlap: float = 0.25, iterations: int = 10,
                     tolerance: float = 1e-4, dh_limit: float = 100.0, slope_limit: float = math.radians(45.0),
                     min_stable_fraction: float = 0.2, jobs: int = 1,
                     stable_mask_name: str = "") -> Tuple[RasterGrid, DhReport, List[TileTransform]]:
    """
    Tile-wise 3D affine coregistration of dem to reference over stable terrain.

    Tiles without enough stable cells, or whose terrain cannot constrain the
    fit, inherit the transform of the nearest estimated tile and are flagged.
    A tile whose estimate would raise its NMAD keeps the identity.

    Raises:
        DisjointGrids: If the grids differ
        NoStableTerrain: If no tile can be estimated
    """
    _check_grids(dem, reference)
    stable = np.ones(dem.values.shape, dtype=bool) if stable_mask is None else np.asarray(stable_mask, dtype=bool)
    if stable.shape != dem.values.shape:
        raise DisjointGrids(f"Stable mask shape {stable.shape} differs from grid {dem.values.shape}")
    cell = abs(dem.geotransform[1])
    layout = plan_coregistration_tiles(dem.values.shape, cell, tile_size_m, overlap)
    gx, gy, slope = _reference_gradients(reference)
    usable = stable & np.isfinite(dem.values) & np.isfinite(reference.values)

    def fit(index_bounds) -> TileTransform:
        index, bounds = index_bounds
        r0, r1, c0, c1 = bounds
        points, (rows, cols) = _tile_points(dem, bounds)
        keep = usable[rows, cols]
        fraction = float(keep.mean()) if keep.size else 0.0
        center_xy = dem.pixel_to_map(0.5 * (c0 + c1), 0.5 * (r0 + r1))
        z_center = float(np.nanmedian(points[keep, 2])) if keep.any() else 0.0
        tile = TileTransform(f"T{index:03d}", bounds, np.array([center_xy[0], center_xy[1], z_center]),
                             stable_fraction=fraction)
        if fraction < min_stable_fraction:
            tile.inherited = True
            logger.warning(f"Tile {tile.tile_id}: stable fraction {fraction:.1%} below {min_stable_fraction:.0%}")
            return tile
        try:
            transform, used = _fit_tile(points[keep], reference, gx, gy, slope, tile.center,
                                        iterations, tolerance, dh_limit, slope_limit)
        except TileUnderconstrained as e:
            logger.warning(f"Tile {tile.tile_id}: {e}")
            tile.inherited = True
            return tile
        tile.iterations = used
        tile.nmad_before = _tile_nmad(points[keep], Affine3D.identity(), reference)
        tile.nmad_after = _tile_nmad(points[keep], transform, reference)
        if not transform.is_small(MAX_LINEAR_DEVIATION) or not tile.nmad_after <= tile.nmad_before + 1e-6:
            tile.reverted = True
            tile.nmad_after = tile.nmad_before
            logger.warning(f"Tile {tile.tile_id}: estimate rejected, keeping identity")
        else:
            tile.transform = transform
        return tile

    tiles = parallel_map(fit, list(enumerate(layout)), jobs)
    estimated = [t for t in tiles if not t.inherited]
    if not estimated:
        raise NoStableTerrain("No coregistration tile has enough stable terrain")
    for tile in tiles:
        if tile.inherited:
            nearest = min(estimated, key=lambda t: float(np.linalg.norm(t.center[:2] - tile.center[:2])))
            tile.transform = nearest.transform
            logger.info(f"Tile {tile.tile_id} inherits the transform of {nearest.tile_id}")

    tile_cells = max(1, int(round(tile_size_m / cell)))
    matrix, translation, _ = blend_transforms(dem.values.shape, tiles, ramp=overlap * tile_cells)
    corrected = apply_blended(dem, matrix, translation)

    report = dh_stats(corrected, reference, stable, stable_mask=stable_mask_name)
    report.tile_transforms = [t.to_dict() for t in tiles]
    report.flagged_tiles = [t.tile_id for t in tiles if t.inherited or t.reverted]
    logger.info(
        f"Coregistered {len(tiles)} tiles ({len(report.flagged_tiles)} flagged): "
        f"stable NMAD {report.nmad:.3f} m, median {report.median:.3f} m"
    )
    return corrected, report, tiles
