"""
Dense matching of a rectified pair by semi-global matching on census costs.

Disparity convention: a pixel at column x in A matches column x + d in B on
the same row. Matching runs in overlapping tiles so the cost volume of one
tile stays small; tiles can run in parallel.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage

from .errors import DataError
from .raster import RasterGrid, write_raster
from .utils import parallel_map

logger = logging.getLogger(__name__)

PATH_DIRECTIONS = [(0, 1), (0, -1), (1, 0), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)]
TILE_MARGIN = 24
MIN_TEXTURE_STD = 1.0

_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


@dataclass
class DisparityMap:
    """Left disparities on the rectified grid of A; NaN marks invalid cells."""
    disparity: RasterGrid
    d_min: int
    d_max: int

    @property
    def values(self) -> np.ndarray:
        return self.disparity.values

    @property
    def valid(self) -> np.ndarray:
        return np.isfinite(self.disparity.values)

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean()) if self.valid.size else 0.0

    def save(self, filepath: Union[str, Path]) -> None:
        write_raster(self.disparity, filepath)


def census_transform(image: np.ndarray, window: int = 7) -> Tuple[np.ndarray, np.ndarray]:
    """
    Census codes (uint64, one bit per neighbour darker than the center) and a
    validity mask that is False wherever the window touches NaN.
    """
    if window % 2 == 0 or window < 3 or window * window - 1 > 64:
        raise ValueError(f"census window must be odd and at most 7x7+1 bits, got {window}")
    values = np.asarray(image, dtype=float)
    nan = ~np.isfinite(values)
    filled = np.where(nan, 0.0, values)
    half = window // 2
    padded = np.pad(filled, half, mode="edge")
    h, w = values.shape
    codes = np.zeros((h, w), dtype=np.uint64)
    bit = 0
    for dy in range(-half, half + 1):
        for dx in range(-half, half + 1):
            if dy == 0 and dx == 0:
                continue
            neighbour = padded[half + dy:half + dy + h, half + dx:half + dx + w]
            codes |= (neighbour < filled).astype(np.uint64) << np.uint64(bit)
            bit += 1
    valid = ~ndimage.maximum_filter(nan, size=window, mode="constant", cval=True)
    return codes, valid


def hamming(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(np.bitwise_xor(a, b))
    return _POPCOUNT[x.view(np.uint8).reshape(x.shape + (8,))].sum(axis=-1, dtype=np.uint8)


def local_std(image: np.ndarray, window: int) -> np.ndarray:
    values = np.nan_to_num(np.asarray(image, dtype=float))
    mean = ndimage.uniform_filter(values, window, mode="nearest")
    sq = ndimage.uniform_filter(values * values, window, mode="nearest")
    return np.sqrt(np.maximum(sq - mean * mean, 0.0))


def cost_volume(codes_a: np.ndarray, codes_b: np.ndarray, rows: slice, cols: slice,
                disparities: np.ndarray, invalid_cost: int) -> np.ndarray:
    """Hamming costs (h, w, D) for A cells in rows x cols against B at column + d."""
    block = codes_a[rows, cols]
    h, w = block.shape
    width_b = codes_b.shape[1]
    gx = np.arange(cols.start, cols.stop)
    volume = np.full((h, w, len(disparities)), invalid_cost, dtype=np.uint8)
    b_rows = codes_b[rows]
    for k, d in enumerate(disparities):
        xb = gx + d
        ok = (xb >= 0) & (xb < width_b)
        if not ok.any():
            continue
        volume[:, ok, k] = hamming(block[:, ok], b_rows[:, xb[ok]])
    return volume


def _path_step(cost: np.ndarray, prev: np.ndarray, p1: int, p2: int) -> np.ndarray:
    """One recursion step along a path for a line of cells: cost and prev are (n, D)."""
    m = prev.min(axis=1, keepdims=True)
    best = np.minimum(prev, m + p2)
    best[:, 1:] = np.minimum(best[:, 1:], prev[:, :-1] + p1)
    best[:, :-1] = np.minimum(best[:, :-1], prev[:, 1:] + p1)
    return cost + best - m


def aggregate(volume: np.ndarray, p1: float, p2: float, paths: int = 8) -> np.ndarray:
    """Sum of path costs over the first `paths` scan directions."""
    if not 1 <= paths <= len(PATH_DIRECTIONS):
        raise ValueError(f"paths must be 1..{len(PATH_DIRECTIONS)}, got {paths}")
    p1, p2 = int(round(p1)), int(round(p2))
    h, w, n_d = volume.shape
    cost = volume.astype(np.int32)
    total = np.zeros((h, w, n_d), dtype=np.int32)
    for dy, dx in PATH_DIRECTIONS[:paths]:
        if dy == 0:
            order = range(w) if dx > 0 else range(w - 1, -1, -1)
            prev = np.zeros((h, n_d), dtype=np.int32)
            for x in order:
                prev = _path_step(cost[:, x, :], prev, p1, p2)
                total[:, x, :] += prev
            continue
        order = range(h) if dy > 0 else range(h - 1, -1, -1)
        last = np.zeros((w, n_d), dtype=np.int32)
        for y in order:
            prev = np.zeros_like(last)
            if dx > 0:
                prev[1:] = last[:-1]
            elif dx < 0:
                prev[:-1] = last[1:]
            else:
                prev = last
            last = _path_step(cost[y], prev, p1, p2)
            total[y] += last
    return total


def _subpixel(volume: np.ndarray, best: np.ndarray) -> np.ndarray:
    n_d = volume.shape[2]
    k = np.clip(best, 1, n_d - 2)
    c0 = np.take_along_axis(volume, k[..., None], axis=2)[..., 0].astype(float)
    cm = np.take_along_axis(volume, (k - 1)[..., None], axis=2)[..., 0].astype(float)
    cp = np.take_along_axis(volume, (k + 1)[..., None], axis=2)[..., 0].astype(float)
    denom = cm - 2.0 * c0 + cp
    with np.errstate(divide="ignore", invalid="ignore"):
        offset = np.where(denom > 0, 0.5 * (cm - cp) / denom, 0.0)
    interior = (best > 0) & (best < n_d - 1)
    return best + np.where(interior, np.clip(offset, -0.5, 0.5), 0.0)


def _right_disparity(total: np.ndarray, disparities: np.ndarray) -> np.ndarray:
    """Integer disparities of B cells (B column + d_R lands in A) inside the block frame."""
    h, w, n_d = total.shape
    big = np.iinfo(np.int32).max
    right = np.full((h, w, n_d), big, dtype=np.int32)
    for k, d in enumerate(disparities):
        # B column xb pairs with A column xb - d
        if d >= 0:
            right[:, d:, k] = total[:, :w - d, k] if d < w else big
        else:
            right[:, :w + d, k] = total[:, -d:, k]
    best = np.argmin(right, axis=2)
    return -disparities[best].astype(float)


def _match_block(codes_a, codes_b, texture_ok, rows: slice, cols: slice, inner: Tuple[slice, slice],
                 disparities: np.ndarray, p1: float, p2: float, paths: int, lr_tolerance: float,
                 invalid_cost: int) -> np.ndarray:
    volume = cost_volume(codes_a, codes_b, rows, cols, disparities, invalid_cost)
    total = aggregate(volume, p1, p2, paths)
    best = np.argmin(total, axis=2)
    left = disparities[0] + _subpixel(total, best)
    right = _right_disparity(total, disparities)
    h, w = left.shape
    xb = np.rint(np.arange(w)[None, :] + left).astype(int)
    inside = (xb >= 0) & (xb < w)
    check = np.full((h, w), np.inf)
    yy = np.broadcast_to(np.arange(h)[:, None], (h, w))
    check[inside] = np.abs(left[inside] + right[yy[inside], xb[inside]])
    left = np.where(check <= lr_tolerance, left, np.nan)
    left = np.where(texture_ok[rows, cols], left, np.nan)
    return left[inner]


def _tiles(length: int, size: int) -> List[Tuple[int, int]]:
    return [(start, min(length, start + size)) for start in range(0, length, size)]


def sgm_match(rect_a: RasterGrid, rect_b: RasterGrid, d_min: int, d_max: int,
              p1: float = 10.0, p2: float = 120.0, census_window: int = 7, paths: int = 8,
              lr_tolerance: float = 1.0, tile_size: int = 512, jobs: int = 1,
              min_texture_std: float = MIN_TEXTURE_STD) -> DisparityMap:
    """
    Semi-global matching over the disparity range [d_min, d_max].

    Cells fail when their census window touches nodata, when the local
    texture is flat, or when the left-right check disagrees by more than
    lr_tolerance pixels.
    """
    a = np.asarray(rect_a.values, dtype=float)
    b = np.asarray(rect_b.values, dtype=float)
    if a.shape[0] != b.shape[0]:
        raise DataError(f"Rectified images must share rows: {a.shape} vs {b.shape}")
    if d_max < d_min:
        raise ValueError(f"Empty disparity range [{d_min}, {d_max}]")
    disparities = np.arange(int(d_min), int(d_max) + 1)
    codes_a, valid_a = census_transform(a, census_window)
    codes_b, _ = census_transform(b, census_window)
    texture_ok = valid_a & (local_std(a, census_window) >= min_texture_std)
    invalid_cost = census_window * census_window - 1
    h, w = a.shape

    jobs_list = []
    for r0, r1 in _tiles(h, tile_size):
        for c0, c1 in _tiles(w, tile_size):
            br0, br1 = max(0, r0 - TILE_MARGIN), min(h, r1 + TILE_MARGIN)
            bc0, bc1 = max(0, c0 - TILE_MARGIN), min(w, c1 + TILE_MARGIN)
            inner = (slice(r0 - br0, r1 - br0), slice(c0 - bc0, c1 - bc0))
            jobs_list.append(((r0, r1, c0, c1), slice(br0, br1), slice(bc0, bc1), inner))

    def run(item):
        _, rows, cols, inner = item
        return _match_block(codes_a, codes_b, texture_ok, rows, cols, inner, disparities,
                            p1, p2, paths, lr_tolerance, invalid_cost)

    logger.info(
        f"SGM: {h}x{w} px, disparities {d_min}..{d_max}, {len(jobs_list)} tiles, {paths} paths"
    )
    results = parallel_map(run, jobs_list, jobs)
    out = np.full((h, w), np.nan)
    for ((r0, r1, c0, c1), _, _, _), block in zip(jobs_list, results):
        out[r0:r1, c0:c1] = block
    result = DisparityMap(rect_a.with_values(out), int(d_min), int(d_max))
    logger.info(f"SGM valid fraction {result.valid_fraction:.1%}")
    return result


def disparity_to_points(disparity: DisparityMap, stride: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Continuous rectified coordinates of valid A cells and their B partners: (xy_a, xy_b)."""
    values = disparity.values
    rows, cols = np.mgrid[0:values.shape[0]:stride, 0:values.shape[1]:stride]
    d = values[rows, cols]
    ok = np.isfinite(d)
    x0, dx, _, y0, _, dy = disparity.disparity.geotransform
    xa = x0 + (cols[ok] + 0.5) * dx
    ya = y0 + (rows[ok] + 0.5) * dy
    return np.column_stack([xa, ya]), np.column_stack([xa + d[ok] * dx, ya])
