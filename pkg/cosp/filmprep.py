"""
Film geometry recovery: stitching, exposed-area alignment, PG-stripe
tracing, bending correction, end clipping and aft rotation.

Pixel positions are continuous coordinates (pixel (i, j) covers
[j, j+1) x [i, i+1)); array samples sit at half-integer positions.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu, window as taper_window
from skimage.measure import ransac
from skimage.registration import phase_cross_correlation
from skimage.transform import EuclideanTransform

from .errors import (
    DataError,
    DegenerateGeometry,
    InsufficientMatches,
    MissingInput,
    StripesNotFound,
    ThresholdNotFound,
    TraceGap,
)
from .models import Rigid2D, ScanPart, StripeTrace
from .raster import RasterGrid, read_raster

logger = logging.getLogger(__name__)

PART_LABELS = ("a", "b", "c", "d")
CLIP_M = 0.015
MEDIAN_WINDOW = 501
EDGE_SIGMA_PX = 2.0
MIN_EDGE_CONTRAST = 10.0          # intensity units per px after smoothing
MIN_VALID_FRACTION = 0.5
MAX_MEDIAN_JUMP_PX = 1.0
MIN_CLASS_SEPARATION = 2.0
RANSAC_THRESHOLD_PX = 1.0
SUBPIXEL_MARGIN_PX = 3
SUBPIXEL_ITERATIONS = 4
SUBPIXEL_TOLERANCE_PX = 0.005


# ---------------------------------------------------------------------------
# Stitching
# ---------------------------------------------------------------------------

@dataclass
class StitchResult:
    raster: RasterGrid
    transforms: Dict[str, Rigid2D]                 # part pixel -> stitched pixel
    misalignment: Dict[str, Dict[str, float]]      # per overlap: mean/max residual (px), matches, inliers


def _rigid_from_skimage(model: EuclideanTransform) -> Rigid2D:
    return Rigid2D(float(model.rotation), float(model.translation[0]), float(model.translation[1]))


def _check_geometry(points: np.ndarray, label: str) -> None:
    if len(points) < 3:
        raise InsufficientMatches(f"Overlap {label}: {len(points)} matches, need at least 3")
    centered = points - points.mean(axis=0)
    sv = np.linalg.svd(centered, compute_uv=False)
    if sv[0] == 0.0 or sv[-1] / sv[0] < 1e-6:
        raise DegenerateGeometry(f"Overlap {label}: matches are collinear")


def fit_rigid(src: np.ndarray, dst: np.ndarray, label: str = "", seed: int = 0) -> Tuple[Rigid2D, np.ndarray]:
    """
    Rotation + translation mapping src to dst: RANSAC on minimal samples,
    then a least-squares refit on the inliers.

    Returns:
        (transform, inlier mask)
    """
    src = np.asarray(src, dtype=float).reshape(-1, 2)
    dst = np.asarray(dst, dtype=float).reshape(-1, 2)
    _check_geometry(src, label)
    _check_geometry(dst, label)
    if len(src) == 3:
        model = EuclideanTransform()
        model.estimate(src, dst)
        return _rigid_from_skimage(model), np.ones(3, dtype=bool)
    model, inliers = ransac(
        (src, dst), EuclideanTransform, min_samples=3, residual_threshold=RANSAC_THRESHOLD_PX,
        max_trials=500, rng=seed,
    )
    if model is None or inliers is None or inliers.sum() < 3:
        raise InsufficientMatches(f"Overlap {label}: no consistent rigid transform among {len(src)} matches")
    _check_geometry(src[inliers], label)
    refined = EuclideanTransform()
    refined.estimate(src[inliers], dst[inliers])
    return _rigid_from_skimage(refined), inliers


def _tapered(values: np.ndarray, taper: np.ndarray) -> np.ndarray:
    return (values - values.mean()) * taper


def window_shift(win_l: np.ndarray, right: np.ndarray, r0: int, rc0: int, taper: np.ndarray,
                 max_shift: float) -> Optional[np.ndarray]:
    """
    Shift (dy, dx) such that right[r0 + i - dy, rc0 + j - dx] matches win_l[i, j].

    An integer estimate from cross-correlation of the tapered windows is
    refined by resampling the right strip at the current estimate and
    correlating again until the remaining shift vanishes.

    Returns:
        The shift, or None when the window leaves the strip or has gaps
    """
    window = win_l.shape[0]
    target = _tapered(win_l, taper)
    win_r = right[r0:r0 + window, rc0:rc0 + window]
    coarse, _, _ = phase_cross_correlation(target, _tapered(win_r, taper), normalization=None)
    if np.any(np.abs(coarse) > max_shift):
        return None
    coarse = np.round(coarse).astype(int)

    # tapered edges carry no weight, so the crop may be clipped at the strip border
    m = SUBPIXEL_MARGIN_PX
    top, left_col = r0 - coarse[0], rc0 - coarse[1]
    r_lo, c_lo = max(top - m, 0), max(left_col - m, 0)
    r_hi, c_hi = min(top + window + m, right.shape[0]), min(left_col + window + m, right.shape[1])
    if r_hi - r_lo < window or c_hi - c_lo < window:
        return None
    patch = right[r_lo:r_hi, c_lo:c_hi]
    if not np.all(np.isfinite(patch)):
        return None

    rows, cols = np.mgrid[0:window, 0:window].astype(float)
    rows += top - r_lo
    cols += left_col - c_lo
    fine = coarse.astype(float)
    for _ in range(SUBPIXEL_ITERATIONS):
        frac = fine - coarse
        if np.any(np.abs(frac) > m - 1):
            return None
        moved = ndimage.map_coordinates(patch, [rows - frac[0], cols - frac[1]], order=3, mode="nearest")
        residual, _, _ = phase_cross_correlation(target, _tapered(moved, taper), upsample_factor=100,
                                                 normalization=None)
        fine = fine + residual
        if np.max(np.abs(residual)) < SUBPIXEL_TOLERANCE_PX:
            break
    return fine


def overlap_matches(left: np.ndarray, right: np.ndarray, offset: float, window: int = 64) -> Tuple[np.ndarray, np.ndarray]:
    """
    Correspondences in the overlap of two side-by-side strips, by sub-pixel
    correlation of Hann-tapered windows on a grid.

    Args:
        left, right: Strip arrays
        offset: Nominal column of right's origin in left's frame

    Returns:
        (right-strip points, left-strip points), both (n, 2) col/row
    """
    h = min(left.shape[0], right.shape[0])
    start = int(math.ceil(offset))
    overlap = left.shape[1] - start
    if overlap < window:
        raise InsufficientMatches(f"Overlap of {overlap} px is narrower than the {window} px window")
    half = window // 2
    taper = taper_window("hann", (window, window))
    n_cols = max(2, min(4, overlap // window))
    col_centers = np.linspace(start + half, left.shape[1] - half, n_cols)
    row_centers = np.arange(half, h - half + 1, window)
    src, dst = [], []
    for cy in row_centers:
        for cx in col_centers:
            c0 = int(round(cx)) - half
            r0 = int(cy) - half
            rc0 = int(round(c0 - offset))
            if c0 < 0 or rc0 < 0 or c0 + window > left.shape[1] or rc0 + window > right.shape[1]:
                continue
            win_l = left[r0:r0 + window, c0:c0 + window]
            win_r = right[r0:r0 + window, rc0:rc0 + window]
            if not (np.all(np.isfinite(win_l)) and np.all(np.isfinite(win_r))):
                continue
            if win_l.std() < 1.0 or win_r.std() < 1.0:
                continue
            shift = window_shift(win_l, right, r0, rc0, taper, half / 2)
            if shift is None:
                continue
            dy, dx = float(shift[0]), float(shift[1])
            centre = np.array([c0 + half, r0 + half], dtype=float)
            dst.append(centre)
            src.append(centre - np.array([c0 - rc0, 0.0]) - np.array([dx, dy]))
    return np.array(src).reshape(-1, 2), np.array(dst).reshape(-1, 2)


def _merge(left: np.ndarray, right: np.ndarray, transform: Rigid2D) -> np.ndarray:
    """Resample right into left's frame and feather linearly across the overlap."""
    h, wl = left.shape
    corners = transform.apply(np.array([[0, 0], [right.shape[1], 0], [0, right.shape[0]],
                                        [right.shape[1], right.shape[0]]], dtype=float))
    width = max(wl, int(math.ceil(corners[:, 0].max())))
    rows, cols = np.mgrid[0:h, 0:width].astype(float)
    source = transform.inverse().apply(np.column_stack([cols.ravel() + 0.5, rows.ravel() + 0.5]))
    warped = ndimage.map_coordinates(right, [source[:, 1] - 0.5, source[:, 0] - 0.5],
                                     order=1, mode="constant", cval=np.nan).reshape(h, width)
    inside = ((source[:, 0] >= 0.5) & (source[:, 0] <= right.shape[1] - 0.5)
              & (source[:, 1] >= 0.5) & (source[:, 1] <= right.shape[0] - 0.5)).reshape(h, width)
    warped[~inside] = np.nan

    out = np.full((h, width), np.nan)
    out[:, :wl] = left
    covered = np.isfinite(warped)
    first = int(np.argmax(covered.any(axis=0))) if covered.any() else wl
    span = max(1, wl - first)
    alpha = np.clip((cols + 0.5 - first) / span, 0.0, 1.0)
    both = covered & np.isfinite(out)
    out[both] = (1.0 - alpha[both]) * out[both] + alpha[both] * warped[both]
    only_right = covered & ~np.isfinite(out)
    out[only_right] = warped[only_right]
    return out


def _nominal_offset(left: RasterGrid, right: RasterGrid, scan_overlap_px: int) -> float:
    offset = right.geotransform[0] - left.geotransform[0]
    return offset if offset > 0 else float(left.width - scan_overlap_px)


def stitch(parts: Sequence[ScanPart],
           matches: Optional[Dict[str, Tuple[np.ndarray, np.ndarray]]] = None,
           window: int = 64,
           scan_overlap_px: int = 1000,
           seed: int = 0) -> StitchResult:
    """
    Stitch four scan parts: a with b, c with d, then ab with cd.

    Args:
        parts: Parts a-d (any order)
        matches: Optional precomputed correspondences per overlap key
            ("ab", "cd", "abcd"): (points in the right strip, points in the left strip)
        window: Phase-correlation window size used when matches are not given
        scan_overlap_px: Nominal overlap when the parts carry no placement

    Raises:
        InsufficientMatches, DegenerateGeometry
    """
    by_label = {p.label: p for p in parts}
    missing = [label for label in PART_LABELS if label not in by_label]
    if missing:
        raise MissingInput(f"Missing scan part(s): {', '.join(missing)}")
    matches = matches or {}
    misalignment: Dict[str, Dict[str, float]] = {}

    def join(key: str, left: np.ndarray, right: np.ndarray, offset: float) -> Tuple[np.ndarray, Rigid2D]:
        if key in matches:
            src, dst = matches[key]
        else:
            src, dst = overlap_matches(left, right, offset, window)
        transform, inliers = fit_rigid(src, dst, key, seed)
        residual = np.linalg.norm(transform.apply(src[inliers]) - dst[inliers], axis=1)
        misalignment[key] = {
            "matches": int(len(src)),
            "inliers": int(inliers.sum()),
            "mean_px": float(residual.mean()),
            "max_px": float(residual.max()),
        }
        logger.info(
            f"Stitched overlap {key}: rotation {transform.rotation:.2e} rad, "
            f"residual mean {residual.mean():.3f} px / max {residual.max():.3f} px"
        )
        return _merge(left, right, transform), transform

    a, b, c, d = (by_label[label].raster for label in PART_LABELS)
    ab, t_ab = join("ab", a.values, b.values, _nominal_offset(a, b, scan_overlap_px))
    cd, t_cd = join("cd", c.values, d.values, _nominal_offset(c, d, scan_overlap_px))
    offset_cd = c.geotransform[0] - a.geotransform[0]
    if offset_cd <= 0:
        offset_cd = float(ab.shape[1] - scan_overlap_px)
    abcd, t_abcd = join("abcd", ab, cd, offset_cd)

    transforms = {
        "a": Rigid2D.identity(),
        "b": t_ab,
        "c": t_abcd,
        "d": t_abcd.compose(t_cd),
    }
    return StitchResult(RasterGrid(abcd), transforms, misalignment)


# ---------------------------------------------------------------------------
# Exposed-area alignment
# ---------------------------------------------------------------------------

@dataclass
class Alignment:
    raster: RasterGrid
    rotation: float                        # radians, major axis angle removed
    centroid: Tuple[float, float]          # col, row in the input
    threshold: float


def exposed_mask(values: np.ndarray) -> Tuple[np.ndarray, float]:
    """
    Exposed-pixel mask by a global Otsu threshold, cleaned by a morphological
    opening and reduced to the largest connected component.

    Raises:
        ThresholdNotFound: If the histogram does not separate into two classes
    """
    finite = values[np.isfinite(values)]
    if finite.size == 0 or np.ptp(finite) == 0:
        raise ThresholdNotFound("Film raster has no intensity variation")
    threshold = float(threshold_otsu(finite))
    low, high = finite[finite <= threshold], finite[finite > threshold]
    if low.size == 0 or high.size == 0:
        raise ThresholdNotFound("Histogram threshold leaves one class empty")
    separation = (high.mean() - low.mean()) / (high.std() + low.std() + 1e-12)
    if separation < MIN_CLASS_SEPARATION:
        raise ThresholdNotFound(f"Histogram is unimodal (class separation {separation:.2f})")
    mask = np.nan_to_num(values, nan=-np.inf) > threshold
    mask = ndimage.binary_opening(mask, structure=np.ones((5, 5), dtype=bool))
    labels, count = ndimage.label(mask)
    if count == 0:
        raise ThresholdNotFound("No exposed area survives the cleanup")
    sizes = ndimage.sum(mask, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1), threshold


def align_exposed_area(film: RasterGrid) -> Alignment:
    """
    Rotate the exposed area so that its principal axes line up with the
    image axes (film length along columns) and crop to it.
    """
    mask, threshold = exposed_mask(film.values)
    rows, cols = np.nonzero(mask)
    pts = np.column_stack([cols + 0.5, rows + 0.5])
    centroid = pts.mean(axis=0)
    cov = np.cov((pts - centroid).T)
    evals, evecs = np.linalg.eigh(cov)
    major = evecs[:, int(np.argmax(evals))]
    angle = math.atan2(major[1], major[0])
    if angle > math.pi / 2:
        angle -= math.pi
    elif angle <= -math.pi / 2:
        angle += math.pi

    back = Rigid2D(-angle, 0.0, 0.0)
    local = back.apply(pts - centroid)
    q_min = np.floor(local.min(axis=0))
    q_max = np.ceil(local.max(axis=0))
    width, height = (q_max - q_min).astype(int)
    out_rows, out_cols = np.mgrid[0:height, 0:width].astype(float)
    q = np.column_stack([out_cols.ravel() + 0.5 + q_min[0], out_rows.ravel() + 0.5 + q_min[1]])
    source = Rigid2D(angle, float(centroid[0]), float(centroid[1])).apply(q)
    values = ndimage.map_coordinates(np.nan_to_num(film.values), [source[:, 1] - 0.5, source[:, 0] - 0.5],
                                     order=1, mode="constant", cval=0.0).reshape(height, width)
    logger.info(f"Aligned exposed area: rotation {math.degrees(angle):.4f} deg, {width}x{height} px")
    return Alignment(RasterGrid(values), angle, (float(centroid[0]), float(centroid[1])), threshold)


# ---------------------------------------------------------------------------
# PG stripes and rail holes
# ---------------------------------------------------------------------------

def _fill_invalid(positions: np.ndarray, valid: np.ndarray) -> np.ndarray:
    idx = np.arange(positions.size)
    return np.interp(idx, idx[valid], positions[valid])


def _longest_gap(valid: np.ndarray) -> int:
    longest = run = 0
    for v in valid:
        run = 0 if v else run + 1
        longest = max(longest, run)
    return longest


def _trace_edge(values: np.ndarray, rows: slice, sign: float, sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-column subpixel row of the strongest edge of the given sign."""
    band = np.nan_to_num(values[rows], nan=0.0)
    gradient = sign * ndimage.gaussian_filter1d(band, sigma, axis=0, order=1)
    k = np.argmax(gradient, axis=0)
    k = np.clip(k, 1, band.shape[0] - 2)
    cols = np.arange(band.shape[1])
    g0, g1, g2 = gradient[k - 1, cols], gradient[k, cols], gradient[k + 1, cols]
    denom = g0 - 2.0 * g1 + g2
    delta = np.where(denom < 0, 0.5 * (g0 - g2) / np.where(denom == 0, -1.0, denom), 0.0)
    positions = (rows.start or 0) + k + np.clip(delta, -0.5, 0.5) + 0.5
    return positions, g1


def trace_stripes(film: RasterGrid,
                  sigma: float = EDGE_SIGMA_PX,
                  median_window: int = MEDIAN_WINDOW) -> Tuple[StripeTrace, StripeTrace]:
    """
    Trace the top and bottom PG stripe edges.

    The top edge is the bright-to-dark transition in the upper quarter of the
    film, the bottom edge the dark-to-bright transition in the lower quarter.
    Each column's edge is the extremum of the Gaussian-smoothed vertical
    gradient, refined by a parabola; the traces are then median filtered.

    Raises:
        StripesNotFound: If either edge is weak or incoherent (KH-4/KH-4A films)
    """
    values = film.values
    h = values.shape[0]
    traces = []
    for side, rows, sign in (("top", slice(0, h // 4), -1.0), ("bottom", slice(h - h // 4, h), 1.0)):
        positions, strength = _trace_edge(values, rows, sign, sigma)
        contrast = float(np.median(strength))
        valid = strength > max(MIN_EDGE_CONTRAST, 0.25 * contrast)
        if valid.mean() < MIN_VALID_FRACTION:
            raise StripesNotFound(f"No {side} PG stripe: only {valid.mean():.0%} of columns show an edge")
        jumps = np.abs(np.diff(positions[valid]))
        if jumps.size and np.median(jumps) > MAX_MEDIAN_JUMP_PX:
            raise StripesNotFound(f"No {side} PG stripe: edge positions are incoherent")
        filled = _fill_invalid(positions, valid)
        window = min(median_window, filled.size - (1 - filled.size % 2))
        filtered = ndimage.median_filter(filled, size=max(1, window), mode="nearest")
        traces.append(StripeTrace(side, filtered, valid))
        logger.debug(f"Traced {side} stripe: {valid.mean():.1%} valid columns, contrast {contrast:.1f}")
    return traces[0], traces[1]


def trace_rail_holes(film: RasterGrid, top: StripeTrace, bottom: StripeTrace) -> Dict[str, List[Tuple[float, float]]]:
    """Centroids of dark blobs inside the bright stripe bands. Diagnostics only."""
    values = np.nan_to_num(film.values)
    out: Dict[str, List[Tuple[float, float]]] = {}
    for side, rows in (("top", slice(0, max(1, int(np.floor(np.min(top.positions))) - 1))),
                       ("bottom", slice(int(np.ceil(np.max(bottom.positions))) + 1, values.shape[0]))):
        band = values[rows]
        if band.size == 0 or np.ptp(band) == 0:
            out[side] = []
            continue
        dark = band < threshold_otsu(band)
        labels, count = ndimage.label(dark)
        centres = ndimage.center_of_mass(dark, labels, range(1, count + 1)) if count else []
        sizes = ndimage.sum(dark, labels, range(1, count + 1)) if count else []
        out[side] = [
            (float(c + 0.5), float(r + 0.5 + (rows.start or 0)))
            for (r, c), size in zip(centres, sizes) if size >= 3
        ]
    logger.debug(f"Rail holes: {len(out['top'])} top, {len(out['bottom'])} bottom")
    return out


# ---------------------------------------------------------------------------
# Bending correction
# ---------------------------------------------------------------------------

@dataclass
class BendingCorrection:
    """
    Column-wise vertical remapping that straightens both stripe traces.

    At film column c the traced stripes sit at T(c) (top) and B(c) (bottom);
    they are moved to the parallel lines t(c) = t0 + s c and b(c) = b0 + s c.
    Rows are mapped linearly between the stripes and extrapolated beyond.
    """
    top: np.ndarray
    bottom: np.ndarray
    slope: float
    top_intercept: float
    bottom_intercept: float

    def targets(self, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        cols = np.asarray(cols, dtype=float)
        return self.top_intercept + self.slope * cols, self.bottom_intercept + self.slope * cols

    def _traces_at(self, cols: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        idx = np.arange(self.top.size) + 0.5
        return np.interp(cols, idx, self.top), np.interp(cols, idx, self.bottom)

    def source_rows(self, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Corrected-frame rows -> rows in the bent film."""
        top, bottom = self._traces_at(cols)
        t, b = self.targets(cols)
        return top + (np.asarray(rows, dtype=float) - t) * (bottom - top) / (b - t)

    def corrected_rows(self, cols: np.ndarray, rows: np.ndarray) -> np.ndarray:
        """Bent-film rows -> corrected-frame rows."""
        top, bottom = self._traces_at(cols)
        t, b = self.targets(cols)
        return t + (np.asarray(rows, dtype=float) - top) * (b - t) / (bottom - top)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "slope": self.slope,
            "top_intercept": self.top_intercept,
            "bottom_intercept": self.bottom_intercept,
            "top_trace": np.round(self.top, 4).tolist(),
            "bottom_trace": np.round(self.bottom, 4).tolist(),
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "BendingCorrection":
        return cls(
            np.asarray(record["top_trace"], dtype=float),
            np.asarray(record["bottom_trace"], dtype=float),
            float(record["slope"]),
            float(record["top_intercept"]),
            float(record["bottom_intercept"]),
        )


def fit_parallel_lines(top: StripeTrace, bottom: StripeTrace) -> Tuple[float, float, float]:
    """Least-squares lines with a shared slope through both traces: (slope, top0, bottom0)."""
    cols = np.arange(top.positions.size) + 0.5
    mt, mb = top.valid, bottom.valid
    n_t, n_b = int(mt.sum()), int(mb.sum())
    a = np.zeros((n_t + n_b, 3))
    a[:n_t, 0], a[:n_t, 1] = cols[mt], 1.0
    a[n_t:, 0], a[n_t:, 2] = cols[mb], 1.0
    rhs = np.concatenate([top.positions[mt], bottom.positions[mb]])
    solution, *_ = np.linalg.lstsq(a, rhs, rcond=None)
    return float(solution[0]), float(solution[1]), float(solution[2])


def correct_bending(film: RasterGrid, traces: Tuple[StripeTrace, StripeTrace],
                    max_gap: int = 2000) -> Tuple[RasterGrid, BendingCorrection]:
    """
    Resample each column vertically so both stripes become straight and parallel.

    Raises:
        TraceGap: If a trace has a run of missing columns longer than max_gap
    """
    top, bottom = traces
    for trace in (top, bottom):
        gap = _longest_gap(trace.valid)
        if gap > max_gap:
            raise TraceGap(f"{trace.side} stripe trace has a {gap}-column gap (max {max_gap})")
    slope, t0, b0 = fit_parallel_lines(top, bottom)
    correction = BendingCorrection(top.positions.copy(), bottom.positions.copy(), slope, t0, b0)

    h, w = film.values.shape
    rows, cols = np.mgrid[0:h, 0:w].astype(float)
    src = correction.source_rows(cols + 0.5, rows + 0.5)
    values = ndimage.map_coordinates(np.nan_to_num(film.values), [src - 0.5, cols],
                                     order=1, mode="nearest")
    shift = correction.top - correction.targets(np.arange(w) + 0.5)[0]
    logger.info(f"Bending correction: max top-stripe displacement {np.max(np.abs(shift)):.2f} px")
    return film.with_values(values), correction


# ---------------------------------------------------------------------------
# Finalization
# ---------------------------------------------------------------------------

def clip_pixels(pitch_um: float, clip_m: float = CLIP_M) -> int:
    """Columns removed at each end for a clip length and scan pitch."""
    if pitch_um <= 0:
        raise ValueError("Scan pitch must be positive")
    return int(round(clip_m / (pitch_um * 1e-6)))


def finalize(film: RasterGrid, look: str, pitch_um: float, clip_m: float = CLIP_M) -> RasterGrid:
    """Clip both film ends; rotate aft images by 180 degrees."""
    if look not in ("fore", "aft"):
        raise ValueError(f"look must be fore|aft, got '{look}'")
    clip = clip_pixels(pitch_um, clip_m)
    if 2 * clip >= film.width:
        raise DataError(f"Film of {film.width} px is shorter than two {clip}-px end clips")
    values = film.values[:, clip:film.width - clip]
    if look == "aft":
        values = np.rot90(values, 2)
    return RasterGrid(np.ascontiguousarray(values))


# ---------------------------------------------------------------------------
# Whole-film preparation
# ---------------------------------------------------------------------------

@dataclass
class FilmRecord:
    """What was done to one film; written next to the finalized raster."""
    image_id: str
    look: str
    pitch_um: float
    clip_px: int
    film_width: int
    film_height: int
    stripes_found: bool = False
    bending_corrected: bool = False
    alignment_rotation_rad: float = 0.0
    stitch_transforms: Dict[str, List[float]] = field(default_factory=dict)
    misalignment: Dict[str, Dict[str, float]] = field(default_factory=dict)
    rail_holes: Dict[str, List[Tuple[float, float]]] = field(default_factory=dict)
    correction: Optional[BendingCorrection] = None

    @property
    def final_size(self) -> Tuple[int, int]:
        return self.film_width - 2 * self.clip_px, self.film_height

    def to_film(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.array(pixels, dtype=float, copy=True).reshape(-1, 2)
        w, h = self.final_size
        if self.look == "aft":
            pixels = np.column_stack([w - pixels[:, 0], h - pixels[:, 1]])
        pixels[:, 0] += self.clip_px
        return pixels

    def from_film(self, pixels: np.ndarray) -> np.ndarray:
        pixels = np.array(pixels, dtype=float, copy=True).reshape(-1, 2)
        pixels[:, 0] -= self.clip_px
        w, h = self.final_size
        if self.look == "aft":
            pixels = np.column_stack([w - pixels[:, 0], h - pixels[:, 1]])
        return pixels

    def correct_points(self, pixels: np.ndarray) -> np.ndarray:
        """Positions measured on the uncorrected final image -> corrected final image."""
        if self.correction is None:
            return np.array(pixels, dtype=float).reshape(-1, 2)
        film = self.to_film(pixels)
        film[:, 1] = self.correction.corrected_rows(film[:, 0], film[:, 1])
        return self.from_film(film)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "image_id": self.image_id,
            "look": self.look,
            "pitch_um": self.pitch_um,
            "clip_px": self.clip_px,
            "film_width": self.film_width,
            "film_height": self.film_height,
            "stripes_found": self.stripes_found,
            "bending_corrected": self.bending_corrected,
            "alignment_rotation_rad": self.alignment_rotation_rad,
            "stitch_transforms": self.stitch_transforms,
            "misalignment": self.misalignment,
            "rail_holes": {k: [list(p) for p in v] for k, v in self.rail_holes.items()},
            "correction": None if self.correction is None else self.correction.to_dict(),
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "FilmRecord":
        correction = record.get("correction")
        return cls(
            image_id=record["image_id"],
            look=record["look"],
            pitch_um=float(record["pitch_um"]),
            clip_px=int(record["clip_px"]),
            film_width=int(record["film_width"]),
            film_height=int(record["film_height"]),
            stripes_found=bool(record.get("stripes_found", False)),
            bending_corrected=bool(record.get("bending_corrected", False)),
            alignment_rotation_rad=float(record.get("alignment_rotation_rad", 0.0)),
            stitch_transforms=record.get("stitch_transforms", {}),
            misalignment=record.get("misalignment", {}),
            rail_holes={k: [tuple(p) for p in v] for k, v in record.get("rail_holes", {}).items()},
            correction=BendingCorrection.from_dict(correction) if correction else None,
        )


def save_film_record(record: FilmRecord, filepath: Union[str, Path]) -> None:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(record.to_dict(), f, indent=2, sort_keys=True)


def load_film_record(filepath: Union[str, Path]) -> FilmRecord:
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Film record not found: {filepath}")
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            return FilmRecord.from_dict(json.load(f))
    except (json.JSONDecodeError, KeyError) as e:
        logger.error(f"Invalid film record '{filepath}': {e}")
        raise DataError(f"Invalid film record '{filepath}': {e}") from e


def load_scan(scans_dir: Union[str, Path], scene: str) -> Union[RasterGrid, List[ScanPart]]:
    """
    Find a film's scan: four parts `<scene>_a..d.tif` or a single
    `<scene>.tif` / `<scene>.bin` strip.
    """
    scans_dir = Path(scans_dir)
    parts = [scans_dir / f"{scene}_{label}.tif" for label in PART_LABELS]
    if all(p.exists() for p in parts):
        return [ScanPart(label, read_raster(p)) for label, p in zip(PART_LABELS, parts)]
    for suffix in (".tif", ".tiff", ".bin"):
        single = scans_dir / f"{scene}{suffix}"
        if single.exists():
            return read_raster(single)
    raise MissingInput(f"No scan found for '{scene}' in {scans_dir}")


def prepare_film(scan: Union[RasterGrid, Sequence[ScanPart]],
                 image_id: str,
                 look: str,
                 pitch_um: float,
                 bending_correction: bool = True,
                 align: bool = True,
                 clip_m: float = CLIP_M,
                 median_window: int = MEDIAN_WINDOW,
                 sigma: float = EDGE_SIGMA_PX,
                 max_gap: int = 2000,
                 window: int = 64,
                 scan_overlap_px: int = 1000) -> Tuple[RasterGrid, FilmRecord]:
    """
    Stitch (when given parts), align, trace, correct and finalize one film.

    Films without PG stripes pass through uncorrected; the record says so.
    """
    misalignment: Dict[str, Dict[str, float]] = {}
    transforms: Dict[str, List[float]] = {}
    if isinstance(scan, RasterGrid):
        film = scan
    else:
        result = stitch(scan, window=window, scan_overlap_px=scan_overlap_px)
        film = result.raster
        misalignment = result.misalignment
        transforms = {k: [t.rotation, t.tx, t.ty] for k, t in result.transforms.items()}

    rotation = 0.0
    if align:
        alignment = align_exposed_area(film)
        film, rotation = alignment.raster, alignment.rotation

    record = FilmRecord(
        image_id=image_id, look=look, pitch_um=pitch_um, clip_px=clip_pixels(pitch_um, clip_m),
        film_width=film.width, film_height=film.height, alignment_rotation_rad=rotation,
        stitch_transforms=transforms, misalignment=misalignment,
    )
    try:
        traces = trace_stripes(film, sigma, median_window)
        record.stripes_found = True
        record.rail_holes = trace_rail_holes(film, *traces)
    except StripesNotFound as e:
        logger.warning(f"Film '{image_id}': {e}; continuing without bending correction")
        traces = None

    if traces is not None:
        corrected, correction = correct_bending(film, traces, max_gap)
        record.correction = correction
        if bending_correction:
            film = corrected
            record.bending_corrected = True
    final = finalize(film, look, pitch_um, clip_m)
    logger.info(
        f"Prepared film '{image_id}' ({look}): {final.width}x{final.height} px, "
        f"stripes {'found' if record.stripes_found else 'absent'}, "
        f"bending {'corrected' if record.bending_corrected else 'not corrected'}"
    )
    return final, record
