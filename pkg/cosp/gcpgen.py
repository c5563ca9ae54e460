"""
GCP generation from Corona / reference-imagery matches.

The matcher itself runs out of process: this module plans the tiles it
works on, refines the film footprint from coarse matches and turns fine
matches into GCP records with heights from a reference DEM. A small
phase-correlation + NCC matcher is bundled for synthetic runs.

Tile ids are ``<image_id>:<mode>:<row>:<col>``; the image a match belongs to
is read back from that prefix.
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from skimage.feature import match_template
from skimage.measure import ransac
from skimage.registration import phase_cross_correlation
from skimage.transform import ProjectiveTransform, SimilarityTransform, resize

from .camera import PanoramicCamera, backproject_rays, film_dimensions_px, intersect_ellipsoid_height, pixel_to_mm
from .errors import (
    DataError,
    FootprintOutsideReference,
    InsufficientMatches,
    MissingInput,
    NodataUnderPoint,
    ResidualTooLarge,
)
from .geodesy import ecef_to_geodetic_array, geodetic_to_ecef_array, geodetic_to_utm, utm_to_geodetic, utm_zone_for
from .models import EcefPoint, FootprintEstimate, GcpRecord, GeodeticPoint, MatchSet, PixelPoint, TileSpec
from .raster import RasterGrid
from .utils import derived_seed

logger = logging.getLogger(__name__)

KM_PER_DEG_LAT = 111.32
MIN_REFINE_MATCHES = 10


# ---------------------------------------------------------------------------
# Footprints
# ---------------------------------------------------------------------------

def footprint_pixels(size: Tuple[int, int]) -> np.ndarray:
    """Image positions of the four footprint corners, in corner order."""
    w, h = size
    return np.array([[0.0, 0.0], [0.0, h], [w, h], [w, 0.0]])


def footprint_mapping(footprint: FootprintEstimate, size: Tuple[int, int]) -> ProjectiveTransform:
    """Homography from Corona pixel (col, row) to (lon, lat) through the four corners."""
    mapping = ProjectiveTransform()
    lonlat = np.array([[c.lon, c.lat] for c in footprint.corners])
    if not mapping.estimate(footprint_pixels(size), lonlat):
        raise FootprintOutsideReference("Footprint corners do not form a valid quadrilateral")
    return mapping


def footprint_from_camera(camera: PanoramicCamera, pitch_um: float, height: float = 0.0,
                          uncertainty_km: float = 10.0) -> FootprintEstimate:
    """Footprint corners from a camera: film corners intersected with the ellipsoid at `height`."""
    size = film_dimensions_px(camera, pitch_um)
    corners = footprint_pixels(size)
    xy = pixel_to_mm(corners[:, 0], corners[:, 1], pitch_um, *size)
    origins, directions = backproject_rays(camera, xy)
    ground = intersect_ellipsoid_height(origins, directions, height)
    if not np.all(np.isfinite(ground)):
        raise FootprintOutsideReference(f"Camera '{camera.image_id}' film corners miss the Earth")
    llh = ecef_to_geodetic_array(ground)
    return FootprintEstimate(
        tuple(GeodeticPoint(float(lon), float(lat), float(h)) for lon, lat, h in llh),
        uncertainty_km,
    )


def shift_footprint(footprint: FootprintEstimate, east_m: float, north_m: float) -> FootprintEstimate:
    lat0 = footprint.center().lat
    dlon = east_m / (1000.0 * KM_PER_DEG_LAT * math.cos(math.radians(lat0)))
    dlat = north_m / (1000.0 * KM_PER_DEG_LAT)
    return FootprintEstimate(
        tuple(GeodeticPoint(c.lon + dlon, c.lat + dlat, c.h) for c in footprint.corners),
        footprint.uncertainty_km,
    )


def _pad_degrees(bounds: Tuple[float, float, float, float], pad_km: float) -> Tuple[float, float, float, float]:
    lon_min, lat_min, lon_max, lat_max = bounds
    lat_mid = 0.5 * (lat_min + lat_max)
    dlat = pad_km / KM_PER_DEG_LAT
    dlon = pad_km / (KM_PER_DEG_LAT * max(math.cos(math.radians(lat_mid)), 1e-6))
    return lon_min - dlon, lat_min - dlat, lon_max + dlon, lat_max + dlat


def raster_geographic_bounds(raster: RasterGrid) -> Tuple[float, float, float, float]:
    """lon/lat bounds of a raster in EPSG:4326 or a UTM CRS (EPSG:326xx / 327xx)."""
    corners = np.array([[0, 0], [raster.width, 0], [0, raster.height], [raster.width, raster.height]], dtype=float)
    x, y = raster.pixel_to_map(corners[:, 0], corners[:, 1])
    zone, north = _utm_of(raster)
    if zone is None:
        lon, lat = x, y
    else:
        lon, lat = utm_to_geodetic(x, y, zone, north)
    return float(np.min(lon)), float(np.min(lat)), float(np.max(lon)), float(np.max(lat))


def _utm_of(raster: RasterGrid) -> Tuple[Optional[int], bool]:
    crs = (raster.crs or "EPSG:4326").upper()
    if crs.startswith("EPSG:326") or crs.startswith("EPSG:327"):
        code = int(crs.split(":")[1])
        return code % 100, code < 32700
    return None, True


def _intersects(a: Tuple[float, float, float, float], b: Tuple[float, float, float, float]) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


# ---------------------------------------------------------------------------
# Tiling
# ---------------------------------------------------------------------------

def _axis_windows(length: int, window: int) -> List[Tuple[int, int]]:
    """ceil(length / window) windows spread evenly from 0 to length."""
    if length <= window:
        return [(0, length)]
    count = int(math.ceil(length / window))
    starts = np.round(np.linspace(0, length - window, count)).astype(int)
    return [(int(s), window) for s in starts]


def plan_tiles(footprint: FootprintEstimate,
               size: Tuple[int, int],
               mode: str = "fine",
               image_id: str = "image",
               reference_bounds: Optional[Tuple[float, float, float, float]] = None,
               tile_size: Tuple[int, int] = (1920, 1440),
               coarse_size: Tuple[int, int] = (10600, 8000),
               fine_overlap: float = 0.1) -> List[TileSpec]:
    """
    Corona windows paired with reference windows.

    Coarse mode cuts ~10600x8000 px windows downscaled to the matcher input
    size, with reference windows padded by the footprint uncertainty. Fine
    mode cuts native-scale matcher-size windows; their reference windows are
    padded by `fine_overlap` of the window's ground extent so matches near a
    tile boundary keep their counterpart.

    Raises:
        FootprintOutsideReference: If the footprint does not meet the reference imagery
    """
    if mode not in ("coarse", "fine"):
        raise ValueError(f"mode must be coarse|fine, got '{mode}'")
    padded = _pad_degrees(footprint.bounds(), footprint.uncertainty_km)
    if reference_bounds is not None and not _intersects(padded, reference_bounds):
        raise FootprintOutsideReference(
            f"Footprint of '{image_id}' {footprint.bounds()} does not meet the reference extent {reference_bounds}"
        )
    w, h = size
    tile_w, tile_h = tile_size
    window_w, window_h = coarse_size if mode == "coarse" else tile_size
    mapping = footprint_mapping(footprint, size)

    tiles = []
    for i, (r0, rh) in enumerate(_axis_windows(h, window_h)):
        for j, (c0, cw) in enumerate(_axis_windows(w, window_w)):
            corners = np.array([[c0, r0], [c0 + cw, r0], [c0, r0 + rh], [c0 + cw, r0 + rh]], dtype=float)
            lonlat = mapping(corners)
            bounds = (float(lonlat[:, 0].min()), float(lonlat[:, 1].min()),
                      float(lonlat[:, 0].max()), float(lonlat[:, 1].max()))
            if mode == "coarse":
                pad_km = footprint.uncertainty_km
            else:
                extent_km = max(bounds[3] - bounds[1], 0.0) * KM_PER_DEG_LAT
                pad_km = fine_overlap * extent_km
            scale = max(1.0, cw / tile_w, rh / tile_h)
            tiles.append(TileSpec(
                tile_id=f"{image_id}:{mode}:{i}:{j}",
                corona_window=(int(c0), int(r0), int(cw), int(rh)),
                reference_window=_pad_degrees(bounds, pad_km),
                scale=float(scale),
                mode=mode,
            ))
    logger.info(f"Planned {len(tiles)} {mode} tiles for '{image_id}' ({w}x{h} px)")
    return tiles


def tile_image_id(tile_id: str) -> str:
    return tile_id.split(":", 1)[0]


# ---------------------------------------------------------------------------
# Matches
# ---------------------------------------------------------------------------

def filter_matches(matches: MatchSet, threshold: float = 0.5, max_per_tile: int = 200) -> MatchSet:
    """Drop matches below the confidence threshold; keep the strongest per tile."""
    keep = np.zeros(len(matches), dtype=bool)
    tile_ids = np.array(matches.tile_ids, dtype=object)
    for tile in dict.fromkeys(matches.tile_ids):
        idx = np.flatnonzero((tile_ids == tile) & (matches.confidence >= threshold))
        order = idx[np.argsort(-matches.confidence[idx], kind="stable")]
        keep[order[:max_per_tile]] = True
    filtered = matches.subset(keep)
    logger.debug(f"Kept {len(filtered)} of {len(matches)} matches (confidence >= {threshold})")
    return filtered


def refine_footprint(footprint: FootprintEstimate,
                     matches: MatchSet,
                     size: Tuple[int, int],
                     threshold: float = 0.5,
                     residual_threshold_m: float = 100.0,
                     seed: int = 0) -> FootprintEstimate:
    """
    Re-derive footprint corners from coarse matches with a robust 2D
    similarity from Corona pixels to UTM.

    Raises:
        InsufficientMatches: Fewer than 10 matches after confidence filtering
        ResidualTooLarge: 95th-percentile fit residual exceeds the prior uncertainty
    """
    good = matches.subset(matches.confidence >= threshold)
    if len(good) < MIN_REFINE_MATCHES:
        raise InsufficientMatches(
            f"Footprint refinement needs {MIN_REFINE_MATCHES} matches, got {len(good)}"
        )
    center = footprint.center()
    zone, north = utm_zone_for(center.lon), center.lat >= 0.0
    e, n = geodetic_to_utm(good.reference[:, 0], good.reference[:, 1], zone, north)
    dst = np.column_stack([e, n])
    src = good.corona
    model, inliers = ransac((src, dst), SimilarityTransform, min_samples=3,
                            residual_threshold=residual_threshold_m, max_trials=1000, rng=seed)
    if model is None or inliers is None or inliers.sum() < 3:
        raise InsufficientMatches("No consistent similarity among the coarse matches")
    refined = SimilarityTransform()
    refined.estimate(src[inliers], dst[inliers])
    residual = np.linalg.norm(refined(src[inliers]) - dst[inliers], axis=1)
    p95_km = float(np.percentile(residual, 95)) / 1000.0
    if p95_km > footprint.uncertainty_km:
        raise ResidualTooLarge(
            f"Footprint fit residual {p95_km:.3f} km exceeds the prior uncertainty {footprint.uncertainty_km} km"
        )
    corners_en = refined(footprint_pixels(size))
    lon, lat = utm_to_geodetic(corners_en[:, 0], corners_en[:, 1], zone, north)
    old = footprint.corners
    result = FootprintEstimate(
        tuple(GeodeticPoint(float(lo), float(la), old[k].h) for k, (lo, la) in enumerate(zip(lon, lat))),
        max(p95_km, 1e-3),
    )
    logger.info(
        f"Refined footprint from {int(inliers.sum())}/{len(good)} matches: "
        f"uncertainty {footprint.uncertainty_km} -> {result.uncertainty_km:.3f} km"
    )
    return result


def dem_heights(dem: RasterGrid, lon: np.ndarray, lat: np.ndarray) -> np.ndarray:
    """Bilinear DEM heights at lon/lat; NaN at nodata or outside."""
    zone, north = _utm_of(dem)
    if zone is None:
        return dem.sample(lon, lat)
    e, n = geodetic_to_utm(lon, lat, zone, north)
    return dem.sample(e, n)


def assemble_gcps(matches: MatchSet,
                  dem: RasterGrid,
                  check_fraction: float = 0.5,
                  seed: int = 42,
                  sigma_px: float = 1.0) -> Tuple[List[GcpRecord], int]:
    """
    GCP records from (already filtered) matches: DEM height under every
    reference point, ECEF ground position, control/check split over the
    pooled matches by a seeded permutation.

    Returns:
        (records, number of matches skipped for nodata)

    Raises:
        NodataUnderPoint: If every match falls on DEM nodata
    """
    heights = dem_heights(dem, matches.reference[:, 0], matches.reference[:, 1])
    valid = np.isfinite(heights)
    skipped = int((~valid).sum())
    for idx in np.flatnonzero(~valid)[:5]:
        logger.debug(
            f"No DEM height under match {idx} ({matches.reference[idx, 0]:.6f}, {matches.reference[idx, 1]:.6f})"
        )
    if skipped and skipped == len(heights):
        logger.error(f"All {skipped} match(es) fall on DEM nodata")
        raise NodataUnderPoint(f"No DEM height under any of the {skipped} match(es)")
    if skipped:
        logger.warning(f"Skipped {skipped} match(es) with no DEM height underneath")

    idx = np.flatnonzero(valid)
    ground = geodetic_to_ecef_array(matches.reference[idx, 0], matches.reference[idx, 1], heights[idx])
    order = np.random.default_rng(derived_seed(seed, "gcp-split")).permutation(len(idx))
    check = np.zeros(len(idx), dtype=bool)
    check[order[:int(round(check_fraction * len(idx)))]] = True

    records = []
    for k, i in enumerate(idx):
        tile = matches.tile_ids[i]
        records.append(GcpRecord(
            image_id=tile_image_id(tile),
            pixel=PixelPoint(float(matches.corona[i, 0]), float(matches.corona[i, 1])),
            ground=EcefPoint.from_array(ground[k]),
            sigma_px=sigma_px,
            role="check" if check[k] else "control",
            gcp_id=f"M{i:05d}",
            source_tile=tile,
        ))
    logger.info(f"Assembled {len(records)} GCPs ({int(check.sum())} check), skipped {skipped}")
    return records, skipped


# ---------------------------------------------------------------------------
# Bundled matcher
# ---------------------------------------------------------------------------

def _subpixel(values: np.ndarray, i: int, j: int) -> Tuple[float, float]:
    def peak(a, b, c):
        denom = a - 2.0 * b + c
        return 0.0 if denom >= 0 else float(np.clip(0.5 * (a - c) / denom, -0.5, 0.5))
    di = peak(values[i - 1, j], values[i, j], values[i + 1, j]) if 0 < i < values.shape[0] - 1 else 0.0
    dj = peak(values[i, j - 1], values[i, j], values[i, j + 1]) if 0 < j < values.shape[1] - 1 else 0.0
    return di, dj


def warp_reference(reference: RasterGrid, mapping: ProjectiveTransform, window: Tuple[int, int, int, int],
                   shape: Tuple[int, int], scale: float) -> np.ndarray:
    """Reference imagery resampled onto a tile's matcher grid through the pixel -> lon/lat mapping."""
    c0, r0, _, _ = window
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]].astype(float)
    corona = np.column_stack([c0 + (cols.ravel() + 0.5) * scale, r0 + (rows.ravel() + 0.5) * scale])
    lonlat = mapping(corona)
    zone, north = _utm_of(reference)
    if zone is None:
        x, y = lonlat[:, 0], lonlat[:, 1]
    else:
        x, y = geodetic_to_utm(lonlat[:, 0], lonlat[:, 1], zone, north)
    return reference.sample(x, y).reshape(shape)


def mock_match_tile(tile: TileSpec,
                    image: np.ndarray,
                    reference: RasterGrid,
                    mapping: ProjectiveTransform,
                    grid: int = 6,
                    patch: int = 31,
                    search: int = 24) -> MatchSet:
    """
    Match one tile: global phase correlation against the warped reference,
    then NCC template search around each node of a grid.
    """
    c0, r0, cw, rh = tile.corona_window
    window = np.asarray(image[r0:r0 + rh, c0:c0 + cw], dtype=float)
    shape = (max(1, int(round(rh / tile.scale))), max(1, int(round(cw / tile.scale))))
    corona = resize(window, shape, order=1, anti_aliasing=tile.scale > 1.0, preserve_range=True) \
        if tile.scale != 1.0 else window
    warped = warp_reference(reference, mapping, tile.corona_window, shape, tile.scale)
    if np.isfinite(warped).mean() < 0.5:
        logger.debug(f"Tile {tile.tile_id}: reference covers too little of the tile")
        return MatchSet([], np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    fill = float(np.nanmean(warped))
    warped = np.where(np.isfinite(warped), warped, fill)

    shift, _, _ = phase_cross_correlation(corona, warped, upsample_factor=10)
    dy, dx = float(shift[0]), float(shift[1])
    half = patch // 2
    margin = half + search + int(math.ceil(max(abs(dx), abs(dy)))) + 1
    if shape[0] <= 2 * margin or shape[1] <= 2 * margin:
        return MatchSet([], np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    corona_pts, reference_pts, scores = [], [], []
    for v in np.linspace(margin, shape[0] - margin - 1, grid).astype(int):
        for u in np.linspace(margin, shape[1] - margin - 1, grid).astype(int):
            template = corona[v - half:v + half + 1, u - half:u + half + 1]
            if template.std() < 1e-6:
                continue
            cv, cu = int(round(v - dy)), int(round(u - dx))
            area = warped[cv - half - search:cv + half + search + 1, cu - half - search:cu + half + search + 1]
            ncc = match_template(area, template)
            i, j = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
            di, dj = _subpixel(ncc, i, j)
            q_row = cv - search + i + di + 0.5
            q_col = cu - search + j + dj + 0.5
            corona_pts.append([c0 + (u + 0.5) * tile.scale, r0 + (v + 0.5) * tile.scale])
            reference_pts.append([c0 + q_col * tile.scale, r0 + q_row * tile.scale])
            scores.append(float(np.clip(ncc[i, j], 0.0, 1.0)))
    if not scores:
        return MatchSet([], np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))
    lonlat = mapping(np.array(reference_pts))
    return MatchSet([tile.tile_id] * len(scores), np.array(corona_pts), lonlat, np.array(scores))


def mock_match(tiles: Sequence[TileSpec],
               images: Mapping[str, np.ndarray],
               reference: RasterGrid,
               mappings: Mapping[str, ProjectiveTransform],
               grid: int = 6,
               patch: int = 31,
               search: int = 24) -> MatchSet:
    """Run the bundled matcher over a tile list; tiles of one image share its mapping."""
    sets = [
        mock_match_tile(tile, images[tile_image_id(tile.tile_id)], reference,
                        mappings[tile_image_id(tile.tile_id)], grid, patch, search)
        for tile in tiles
    ]
    tile_ids = [t for s in sets for t in s.tile_ids]
    corona = np.vstack([s.corona for s in sets]) if sets else np.zeros((0, 2))
    reference_pts = np.vstack([s.reference for s in sets]) if sets else np.zeros((0, 2))
    confidence = np.concatenate([s.confidence for s in sets]) if sets else np.zeros(0)
    logger.info(f"Bundled matcher: {len(tile_ids)} matches over {len(tiles)} tiles")
    return MatchSet(tile_ids, corona, reference_pts, confidence)


def matches_by_image(matches: MatchSet) -> Dict[str, MatchSet]:
    images = np.array([tile_image_id(t) for t in matches.tile_ids], dtype=object)
    return {img: matches.subset(images == img) for img in dict.fromkeys(images.tolist())}


# ---------------------------------------------------------------------------
# Footprint files
# ---------------------------------------------------------------------------

def footprint_to_dict(footprint: FootprintEstimate) -> Dict[str, object]:
    return {
        "corners": [[c.lon, c.lat, c.h] for c in footprint.corners],
        "uncertainty_km": footprint.uncertainty_km,
    }


def footprint_from_dict(record: Mapping[str, object]) -> FootprintEstimate:
    corners = tuple(GeodeticPoint(float(c[0]), float(c[1]), float(c[2]) if len(c) > 2 else 0.0)
                    for c in record["corners"])
    return FootprintEstimate(corners, float(record.get("uncertainty_km", 10.0)))


def save_footprints(filepath: Union[str, Path], footprints: Mapping[str, FootprintEstimate]) -> None:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump({k: footprint_to_dict(v) for k, v in footprints.items()}, f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(footprints)} footprint(s) to '{filepath}'")


def load_footprints(filepath: Union[str, Path]) -> Dict[str, FootprintEstimate]:
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Footprint file not found: {filepath}")
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            data = json.load(f)
        return {k: footprint_from_dict(v) for k, v in data.items()}
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        logger.error(f"Invalid footprint file '{filepath}': {e}")
        raise DataError(f"Invalid footprint file '{filepath}': {e}") from e
