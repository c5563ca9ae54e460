"""
Polynomial epipolar rectification of a panoramic pair.

Each image is first rotated so that its global epipolar direction becomes
horizontal, then mapped by two bivariate polynomials of total degree n
(default 4) in normalized rotated coordinates. The polynomials are fit to
virtual correspondences generated through the camera models so that
corresponding points land on equal rows.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.feature import match_template

from .camera import (
    PanoramicCamera,
    backproject_rays,
    film_dimensions_px,
    intersect_ellipsoid_height,
    mm_to_pixel,
    pixel_to_mm,
    project_with_status,
)
from .errors import DataError, DegenerateGeometry, IllConditionedFit, InsufficientMatches, MissingInput, ProjectionFailure
from .raster import RasterGrid
from .utils import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_DEGREE = 4
DEFAULT_GRID = 25
DEFAULT_LEVELS = 5
HEIGHT_PADDING = 0.1
MIN_DIRECTION_SUCCESS = 0.8
MIN_DIRECTION_POINTS = 10
RIDGE = 1e-9
INVERSE_ITERATIONS = 15


# ---------------------------------------------------------------------------
# Polynomial basis
# ---------------------------------------------------------------------------

def monomial_exponents(degree: int) -> List[Tuple[int, int]]:
    """(i, j) exponents of u^i v^j for total degree <= degree, constant first."""
    return [(total - j, j) for total in range(degree + 1) for j in range(total + 1)]


def monomials(u: np.ndarray, v: np.ndarray, degree: int) -> np.ndarray:
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    return np.column_stack([u ** i * v ** j for i, j in monomial_exponents(degree)])


def monomial_derivatives(u: np.ndarray, v: np.ndarray, degree: int) -> Tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=float).ravel()
    v = np.asarray(v, dtype=float).ravel()
    du, dv = [], []
    for i, j in monomial_exponents(degree):
        du.append(i * u ** max(i - 1, 0) * v ** j if i else np.zeros_like(u))
        dv.append(j * u ** i * v ** max(j - 1, 0) if j else np.zeros_like(v))
    return np.column_stack(du), np.column_stack(dv)


def _identity_coefficients(degree: int) -> Tuple[np.ndarray, np.ndarray]:
    exps = monomial_exponents(degree)
    x = np.zeros(len(exps))
    y = np.zeros(len(exps))
    x[exps.index((1, 0))] = 1.0
    y[exps.index((0, 1))] = 1.0
    return x, y


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class RectifiedSide:
    """Rotation about the image center followed by polynomials in normalized coordinates."""
    angle: float
    center: Tuple[float, float]
    scale: float
    degree: int
    x_coeffs: np.ndarray
    y_coeffs: np.ndarray
    size: Tuple[int, int]

    def __post_init__(self):
        self.x_coeffs = np.asarray(self.x_coeffs, dtype=float)
        self.y_coeffs = np.asarray(self.y_coeffs, dtype=float)
        n = len(monomial_exponents(self.degree))
        if self.x_coeffs.shape != (n,) or self.y_coeffs.shape != (n,):
            raise ValueError(f"Degree-{self.degree} polynomials need {n} coefficients each")

    def rotate(self, cols, rows) -> Tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.angle), math.sin(self.angle)
        dx = np.asarray(cols, dtype=float) - self.center[0]
        dy = np.asarray(rows, dtype=float) - self.center[1]
        return (c * dx + s * dy) / self.scale, (-s * dx + c * dy) / self.scale

    def unrotate(self, u, v) -> Tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = np.asarray(u, dtype=float) * self.scale
        v = np.asarray(v, dtype=float) * self.scale
        return self.center[0] + c * u - s * v, self.center[1] + s * u + c * v

    def forward(self, cols, rows) -> Tuple[np.ndarray, np.ndarray]:
        """Image pixel -> rectified coordinates."""
        shape = np.shape(cols)
        u, v = self.rotate(cols, rows)
        m = monomials(u, v, self.degree)
        return (m @ self.x_coeffs * self.scale).reshape(shape), (m @ self.y_coeffs * self.scale).reshape(shape)

    def jacobian_determinant(self, cols, rows) -> np.ndarray:
        u, v = self.rotate(cols, rows)
        du, dv = monomial_derivatives(u, v, self.degree)
        return (du @ self.x_coeffs) * (dv @ self.y_coeffs) - (dv @ self.x_coeffs) * (du @ self.y_coeffs)

    def inverse(self, x, y) -> Tuple[np.ndarray, np.ndarray]:
        """Rectified coordinates -> image pixel, by Newton iteration on the polynomials."""
        shape = np.shape(x)
        tx = np.asarray(x, dtype=float).ravel() / self.scale
        ty = np.asarray(y, dtype=float).ravel() / self.scale
        u = tx - self.x_coeffs[0]
        v = ty - self.y_coeffs[0]
        for _ in range(INVERSE_ITERATIONS):
            m = monomials(u, v, self.degree)
            du, dv = monomial_derivatives(u, v, self.degree)
            fx = m @ self.x_coeffs - tx
            fy = m @ self.y_coeffs - ty
            a, b = du @ self.x_coeffs, dv @ self.x_coeffs
            c, d = du @ self.y_coeffs, dv @ self.y_coeffs
            det = a * d - b * c
            with np.errstate(divide="ignore", invalid="ignore"):
                step_u = (d * fx - b * fy) / det
                step_v = (-c * fx + a * fy) / det
            u = u - step_u
            v = v - step_v
            if np.nanmax(np.abs(np.r_[step_u, step_v]), initial=0.0) < 1e-12:
                break
        cols, rows = self.unrotate(u, v)
        return cols.reshape(shape), rows.reshape(shape)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "angle_rad": self.angle,
            "center": list(self.center),
            "scale": self.scale,
            "degree": self.degree,
            "x_coeffs": self.x_coeffs.tolist(),
            "y_coeffs": self.y_coeffs.tolist(),
            "size": list(self.size),
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "RectifiedSide":
        return cls(
            float(record["angle_rad"]),
            tuple(record["center"]),
            float(record["scale"]),
            int(record["degree"]),
            np.asarray(record["x_coeffs"], dtype=float),
            np.asarray(record["y_coeffs"], dtype=float),
            tuple(int(v) for v in record["size"]),
        )


@dataclass
class RectificationModel:
    """Both sides of a rectified pair plus the shared output domain (x0, y0, width, height)."""
    a: RectifiedSide
    b: RectifiedSide
    domain: Tuple[float, float, int, int]
    disparity_min: float = 0.0
    disparity_max: float = 0.0
    fit_rms_px: float = 0.0
    heldout_rms_px: float = 0.0

    def side(self, name: str) -> RectifiedSide:
        if name not in ("a", "b"):
            raise ValueError(f"side must be a|b, got '{name}'")
        return self.a if name == "a" else self.b

    def disparity_range(self, margin: int = 0) -> Tuple[int, int]:
        return int(math.floor(self.disparity_min)) - margin, int(math.ceil(self.disparity_max)) + margin

    def grid_to_rectified(self, cols, rows) -> Tuple[np.ndarray, np.ndarray]:
        """Continuous output-raster coordinates -> rectified coordinates."""
        return self.domain[0] + np.asarray(cols, dtype=float), self.domain[1] + np.asarray(rows, dtype=float)

    def is_bijective(self, samples: int = 50) -> bool:
        for side in (self.a, self.b):
            w, h = side.size
            cols, rows = np.meshgrid(np.linspace(0, w, samples), np.linspace(0, h, samples))
            if np.any(side.jacobian_determinant(cols.ravel(), rows.ravel()) <= 0):
                return False
        return True

    @classmethod
    def identity(cls, size: Tuple[int, int], degree: int = DEFAULT_DEGREE, angle: float = 0.0) -> "RectificationModel":
        w, h = size
        x, y = _identity_coefficients(degree)
        sides = [RectifiedSide(angle, (w / 2.0, h / 2.0), 1.0, degree, x.copy(), y.copy(), (w, h)) for _ in range(2)]
        model = cls(sides[0], sides[1], (0.0, 0.0, 1, 1))
        model.domain = _union_domain(model.a, model.b)
        return model

    def to_dict(self) -> Dict[str, Any]:
        return {
            "a": self.a.to_dict(),
            "b": self.b.to_dict(),
            "domain": list(self.domain),
            "disparity_min": self.disparity_min,
            "disparity_max": self.disparity_max,
            "fit_rms_px": self.fit_rms_px,
            "heldout_rms_px": self.heldout_rms_px,
        }

    @classmethod
    def from_dict(cls, record: Dict[str, Any]) -> "RectificationModel":
        x0, y0, w, h = record["domain"]
        return cls(
            RectifiedSide.from_dict(record["a"]),
            RectifiedSide.from_dict(record["b"]),
            (float(x0), float(y0), int(w), int(h)),
            float(record.get("disparity_min", 0.0)),
            float(record.get("disparity_max", 0.0)),
            float(record.get("fit_rms_px", 0.0)),
            float(record.get("heldout_rms_px", 0.0)),
        )


def _union_domain(a: RectifiedSide, b: RectifiedSide) -> Tuple[float, float, int, int]:
    xs, ys = [], []
    for side in (a, b):
        w, h = side.size
        t = np.linspace(0.0, 1.0, 33)
        border = np.concatenate([
            np.column_stack([t * w, np.zeros_like(t)]), np.column_stack([t * w, np.full_like(t, h)]),
            np.column_stack([np.zeros_like(t), t * h]), np.column_stack([np.full_like(t, w), t * h]),
        ])
        x, y = side.forward(border[:, 0], border[:, 1])
        xs.append(x)
        ys.append(y)
    x0, x1 = float(np.floor(np.min(np.concatenate(xs)))), float(np.ceil(np.max(np.concatenate(xs))))
    y0, y1 = float(np.floor(np.min(np.concatenate(ys)))), float(np.ceil(np.max(np.concatenate(ys))))
    return x0, y0, int(x1 - x0), int(y1 - y0)


def save_rectification(model: RectificationModel, filepath: Union[str, Path]) -> None:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump(model.to_dict(), f, indent=2, sort_keys=True)
    logger.debug(f"Saved rectification model to '{filepath}'")


def load_rectification(filepath: Union[str, Path]) -> RectificationModel:
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Rectification model not found: {filepath}")
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            return RectificationModel.from_dict(json.load(f))
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        logger.error(f"Invalid rectification model '{filepath}': {e}")
        raise DataError(f"Invalid rectification model '{filepath}': {e}") from e


# ---------------------------------------------------------------------------
# Virtual correspondences
# ---------------------------------------------------------------------------

def _grid_pixels(size: Tuple[int, int], grid: int, offset: float = 0.0) -> np.ndarray:
    w, h = size
    fractions = (np.arange(grid) + 0.5 + offset) / grid
    fractions = fractions[(fractions > 0) & (fractions < 1)]
    cols, rows = np.meshgrid(fractions * w, fractions * h)
    return np.column_stack([cols.ravel(), rows.ravel()])


def transfer_points(src: PanoramicCamera, dst: PanoramicCamera, pixels: np.ndarray, height: float,
                    pitch_um: float) -> Tuple[np.ndarray, np.ndarray]:
    """Pixels of src -> ground at ellipsoid height -> pixels of dst; returns (dst pixels, ok)."""
    src_size = film_dimensions_px(src, pitch_um)
    dst_size = film_dimensions_px(dst, pitch_um)
    xy = pixel_to_mm(pixels[:, 0], pixels[:, 1], pitch_um, *src_size)
    origins, directions = backproject_rays(src, xy)
    ground = intersect_ellipsoid_height(origins, directions, height)
    ok = np.all(np.isfinite(ground), axis=1)
    out = np.full((len(pixels), 2), np.nan)
    if ok.any():
        xy_dst, proj_ok = project_with_status(dst, ground[ok])
        cols, rows, inside = mm_to_pixel(np.nan_to_num(xy_dst), pitch_um, *dst_size)
        good = proj_ok & inside
        idx = np.flatnonzero(ok)
        out[idx[good]] = np.column_stack([cols, rows])[good]
        ok[idx[~good]] = False
    return out, ok


def _line_angle(vectors: np.ndarray) -> float:
    """Mean orientation in (-pi/2, pi/2] of undirected segments, by doubled-angle averaging."""
    angles = np.arctan2(vectors[:, 1], vectors[:, 0])
    weights = np.linalg.norm(vectors, axis=1)
    mean = 0.5 * math.atan2(np.sum(weights * np.sin(2 * angles)), np.sum(weights * np.cos(2 * angles)))
    return mean + math.pi if mean <= -math.pi / 2 else mean


def estimate_epipolar_directions(cam_a: PanoramicCamera, cam_b: PanoramicCamera,
                                 height_range: Tuple[float, float], pitch_um: float,
                                 grid: int = DEFAULT_GRID) -> Tuple[float, float]:
    """
    Global epipolar line orientations (radians, image col/row frame) in A and B.

    A grid of pixels in one image is carried to the ground at the lowest and
    highest terrain heights and reprojected into the other image; the
    orientation of the resulting segments is averaged. Only grid pixels
    whose mid-height ground point falls inside the other image take part.
    The orientation for B is taken within 90 degrees of A's so both images
    turn the same way round.

    Raises:
        ProjectionFailure: If the images barely overlap, or fewer than 80% of
            the overlapping grid points transfer at both heights
    """
    h_min, h_max = height_range

    def direction(src: PanoramicCamera, dst: PanoramicCamera) -> float:
        pixels = _grid_pixels(film_dimensions_px(src, pitch_um), grid)
        _, overlap = transfer_points(src, dst, pixels, 0.5 * (h_min + h_max), pitch_um)
        if overlap.sum() < MIN_DIRECTION_POINTS:
            raise ProjectionFailure(
                f"Only {int(overlap.sum())} grid points of '{src.image_id}' fall inside '{dst.image_id}'"
            )
        low, ok_low = transfer_points(src, dst, pixels, h_min, pitch_um)
        high, ok_high = transfer_points(src, dst, pixels, h_max, pitch_um)
        ok = ok_low & ok_high & overlap
        success = ok.sum() / overlap.sum()
        if success < MIN_DIRECTION_SUCCESS:
            raise ProjectionFailure(
                f"Only {success:.0%} of overlapping grid points transfer from '{src.image_id}' to '{dst.image_id}'"
            )
        return _line_angle(high[ok] - low[ok])

    angle_b = direction(cam_a, cam_b)
    angle_a = direction(cam_b, cam_a)
    # both images turn the same way round: B's angle lies within 90 deg of A's
    if angle_b - angle_a > math.pi / 2:
        angle_b -= math.pi
    elif angle_b - angle_a < -math.pi / 2:
        angle_b += math.pi
    logger.info(f"Epipolar directions: A {math.degrees(angle_a):.2f} deg, B {math.degrees(angle_b):.2f} deg")
    return angle_a, angle_b


def virtual_correspondences(cam_a: PanoramicCamera, cam_b: PanoramicCamera,
                            height_range: Tuple[float, float], pitch_um: float,
                            grid: int = DEFAULT_GRID, levels: int = DEFAULT_LEVELS,
                            offset: float = 0.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pixel pairs on a grid of A x height levels spanning the range +-10%: (pA, pB, heights)."""
    h_min, h_max = height_range
    pad = HEIGHT_PADDING * max(h_max - h_min, 1.0)
    heights = np.linspace(h_min - pad, h_max + pad, levels)
    if offset:
        heights = 0.5 * (heights[:-1] + heights[1:]) if levels > 1 else heights
    pixels = _grid_pixels(film_dimensions_px(cam_a, pitch_um), grid, offset)
    pa, pb, hs = [], [], []
    for height in heights:
        transferred, ok = transfer_points(cam_a, cam_b, pixels, float(height), pitch_um)
        pa.append(pixels[ok])
        pb.append(transferred[ok])
        hs.append(np.full(int(ok.sum()), height))
    return np.vstack(pa), np.vstack(pb), np.concatenate(hs)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------

def _fit_rows(side_a: RectifiedSide, side_b: RectifiedSide, pa: np.ndarray, pb: np.ndarray,
              condition_limit: float) -> None:
    """
    Fit the row polynomials of both sides so corresponding points share a row.

    A's row polynomial is v + (terms other than 1 and v), B's is free; a
    small ridge on A's extra terms keeps A close to its rotated frame.
    """
    degree = side_a.degree
    exps = monomial_exponents(degree)
    ua, va = side_a.rotate(pa[:, 0], pa[:, 1])
    ub, vb = side_b.rotate(pb[:, 0], pb[:, 1])
    ma = monomials(ua, va, degree)
    mb = monomials(ub, vb, degree)
    fixed = [exps.index((0, 0)), exps.index((0, 1))]
    free_a = [k for k in range(len(exps)) if k not in fixed]
    design = np.hstack([ma[:, free_a], -mb])
    rhs = -va
    # unit column norms, so the condition number reflects geometry rather than monomial magnitudes
    norms = np.linalg.norm(design, axis=0)
    if np.any(norms == 0.0):
        raise IllConditionedFit("Rectification design has an all-zero polynomial term")
    scaled = design / norms
    normal = scaled.T @ scaled
    ridge = np.zeros(design.shape[1])
    ridge[:len(free_a)] = RIDGE
    normal = normal + np.diag(ridge)
    condition = float(np.linalg.cond(normal))
    if not np.isfinite(condition) or condition > condition_limit:
        raise IllConditionedFit(f"Rectification normal matrix condition {condition:.3e} exceeds {condition_limit:.1e}")
    solution = np.linalg.solve(normal, scaled.T @ rhs) / norms
    y_a = np.zeros(len(exps))
    y_a[exps.index((0, 1))] = 1.0
    y_a[free_a] = solution[:len(free_a)]
    side_a.y_coeffs = y_a
    side_b.y_coeffs = solution[len(free_a):]


def _row_residuals(model: RectificationModel, pa: np.ndarray, pb: np.ndarray) -> np.ndarray:
    _, ya = model.a.forward(pa[:, 0], pa[:, 1])
    _, yb = model.b.forward(pb[:, 0], pb[:, 1])
    return ya - yb


def _finish_model(side_a: RectifiedSide, side_b: RectifiedSide, pa: np.ndarray, pb: np.ndarray,
                  reference_mask: np.ndarray) -> RectificationModel:
    """Shift B's columns so mid-height disparities are ~0; set domain and disparity range."""
    xa, _ = side_a.forward(pa[:, 0], pa[:, 1])
    xb, _ = side_b.forward(pb[:, 0], pb[:, 1])
    offset = float(np.median((xa - xb)[reference_mask])) if reference_mask.any() else 0.0
    side_b.x_coeffs = side_b.x_coeffs.copy()
    side_b.x_coeffs[0] += offset / side_b.scale
    model = RectificationModel(side_a, side_b, _union_domain(side_a, side_b))
    xb, _ = side_b.forward(pb[:, 0], pb[:, 1])
    disparity = xb - xa
    model.disparity_min, model.disparity_max = float(disparity.min()), float(disparity.max())
    return model


def build_rectification(cam_a: PanoramicCamera, cam_b: PanoramicCamera,
                        height_range: Tuple[float, float], pitch_um: float,
                        degree: int = DEFAULT_DEGREE, grid: int = DEFAULT_GRID, levels: int = DEFAULT_LEVELS,
                        condition_limit: float = 1e12) -> RectificationModel:
    """
    Rectification from calibrated cameras: rotate each image to its global
    epipolar direction, generate virtual correspondences and fit the row
    polynomials. Held-out correspondences (grid shifted by half a cell,
    heights between the fitting levels) measure the residual y-parallax.

    Raises:
        IllConditionedFit, ProjectionFailure, DegenerateGeometry
    """
    angle_a, angle_b = estimate_epipolar_directions(cam_a, cam_b, height_range, pitch_um, grid)
    size_a = film_dimensions_px(cam_a, pitch_um)
    size_b = film_dimensions_px(cam_b, pitch_um)
    scale = 0.5 * max(math.hypot(*size_a), math.hypot(*size_b))
    x_id, y_id = _identity_coefficients(degree)
    side_a = RectifiedSide(angle_a, (size_a[0] / 2.0, size_a[1] / 2.0), scale, degree, x_id.copy(), y_id.copy(), size_a)
    side_b = RectifiedSide(angle_b, (size_b[0] / 2.0, size_b[1] / 2.0), scale, degree, x_id.copy(), y_id.copy(), size_b)

    pa, pb, heights = virtual_correspondences(cam_a, cam_b, height_range, pitch_um, grid, levels)
    n_terms = len(monomial_exponents(degree))
    if len(pa) < 2 * n_terms:
        raise DegenerateGeometry(f"Only {len(pa)} virtual correspondences for {2 * n_terms} coefficients")
    _fit_rows(side_a, side_b, pa, pb, condition_limit)
    mid = np.isclose(heights, np.median(np.unique(heights)))
    model = _finish_model(side_a, side_b, pa, pb, mid)

    model.fit_rms_px = float(np.sqrt(np.mean(_row_residuals(model, pa, pb) ** 2)))
    ha, hb, _ = virtual_correspondences(cam_a, cam_b, height_range, pitch_um, grid, levels, offset=0.5)
    if len(ha):
        model.heldout_rms_px = float(np.sqrt(np.mean(_row_residuals(model, ha, hb) ** 2)))
    if not model.is_bijective():
        raise IllConditionedFit("Rectifying polynomials are not bijective on the image domain")
    logger.info(
        f"Rectification (degree {degree}): fit RMS {model.fit_rms_px:.4f} px, "
        f"held-out RMS {model.heldout_rms_px:.4f} px, disparity {model.disparity_min:.1f}..{model.disparity_max:.1f} px"
    )
    return model


def build_rectification_from_matches(pa: np.ndarray, pb: np.ndarray,
                                     size_a: Tuple[int, int], size_b: Tuple[int, int],
                                     degree: int = DEFAULT_DEGREE,
                                     condition_limit: float = 1e12,
                                     min_relief_px: float = 0.5) -> RectificationModel:
    """
    Feature-based rectification for images without camera models: the
    epipolar direction is the principal direction of the match displacements.

    Raises:
        InsufficientMatches: Too few matches for the polynomial terms
        DegenerateGeometry: Displacements show no parallax spread (flat scene)
    """
    pa = np.asarray(pa, dtype=float).reshape(-1, 2)
    pb = np.asarray(pb, dtype=float).reshape(-1, 2)
    n_terms = len(monomial_exponents(degree))
    if len(pa) < 2 * n_terms:
        raise InsufficientMatches(f"{len(pa)} matches for {2 * n_terms} polynomial coefficients")
    displacement = pb - pa
    centered = displacement - displacement.mean(axis=0)
    _, sv, vt = np.linalg.svd(centered, full_matrices=False)
    spread = sv[0] / math.sqrt(len(pa))
    if spread < min_relief_px:
        raise DegenerateGeometry(f"Match displacements spread only {spread:.3f} px: the scene looks flat")
    angle = _line_angle(vt[0][None, :])
    scale = 0.5 * max(math.hypot(*size_a), math.hypot(*size_b))
    x_id, y_id = _identity_coefficients(degree)
    side_a = RectifiedSide(angle, (size_a[0] / 2.0, size_a[1] / 2.0), scale, degree, x_id.copy(), y_id.copy(), tuple(size_a))
    side_b = RectifiedSide(angle, (size_b[0] / 2.0, size_b[1] / 2.0), scale, degree, x_id.copy(), y_id.copy(), tuple(size_b))
    _fit_rows(side_a, side_b, pa, pb, condition_limit)
    model = _finish_model(side_a, side_b, pa, pb, np.ones(len(pa), dtype=bool))
    model.fit_rms_px = float(np.sqrt(np.mean(_row_residuals(model, pa, pb) ** 2)))
    logger.info(f"Feature-based rectification from {len(pa)} matches: fit RMS {model.fit_rms_px:.4f} px")
    return model


# ---------------------------------------------------------------------------
# Resampling and y-parallax
# ---------------------------------------------------------------------------

def resample_rectified(image: Union[RasterGrid, np.ndarray], model: RectificationModel, side: str,
                       jobs: int = 1, block_rows: int = 256) -> RasterGrid:
    """Inverse-mapped bilinear resampling onto the shared rectified grid; NaN outside the image."""
    values = image.values if isinstance(image, RasterGrid) else np.asarray(image, dtype=float)
    rect = model.side(side)
    x0, y0, width, height = model.domain

    def block(r0: int) -> np.ndarray:
        r1 = min(height, r0 + block_rows)
        rows, cols = np.mgrid[r0:r1, 0:width].astype(float)
        src_cols, src_rows = rect.inverse(x0 + cols + 0.5, y0 + rows + 0.5)
        h, w = values.shape
        inside = (src_cols >= 0.5) & (src_cols <= w - 0.5) & (src_rows >= 0.5) & (src_rows <= h - 0.5)
        out = ndimage.map_coordinates(np.nan_to_num(values), [np.nan_to_num(src_rows) - 0.5, np.nan_to_num(src_cols) - 0.5],
                                      order=1, mode="nearest")
        out = np.where(inside, out, np.nan)
        nan_src = ndimage.map_coordinates(np.isnan(values).astype(float),
                                          [np.nan_to_num(src_rows) - 0.5, np.nan_to_num(src_cols) - 0.5],
                                          order=1, mode="nearest")
        out[nan_src > 0] = np.nan
        return out

    out = np.vstack(parallel_map(block, range(0, height, block_rows), jobs))
    return RasterGrid(out, (x0, 1.0, 0.0, y0, 0.0, 1.0))


# 3x3 neighbourhood design for a quadratic surface a + b x + c y + d x^2 + e xy + g y^2
_QUAD_OFFSETS = np.array([(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)], dtype=float)
_QUAD_PINV = np.linalg.pinv(np.column_stack([
    np.ones(9), _QUAD_OFFSETS[:, 1], _QUAD_OFFSETS[:, 0],
    _QUAD_OFFSETS[:, 1] ** 2, _QUAD_OFFSETS[:, 1] * _QUAD_OFFSETS[:, 0], _QUAD_OFFSETS[:, 0] ** 2,
]))


def _parabola_offset(below: float, peak: float, above: float) -> float:
    denom = below - 2.0 * peak + above
    if denom >= 0:
        return 0.0
    return float(np.clip(0.5 * (below - above) / denom, -0.5, 0.5))


def subpixel_peak(score: np.ndarray) -> Optional[Tuple[float, float, float]]:
    """
    Peak of a correlation surface as (row, col, value), refined jointly in
    both axes by a quadratic surface over the 3x3 neighbourhood. Peaks on
    the border fall back to a parabola along each axis that has neighbours.
    """
    k, l = np.unravel_index(int(np.argmax(score)), score.shape)
    value = float(score[k, l])
    if not np.isfinite(value):
        return None
    if 0 < k < score.shape[0] - 1 and 0 < l < score.shape[1] - 1:
        _, b, c, d, e, g = _QUAD_PINV @ score[k - 1:k + 2, l - 1:l + 2].ravel()
        hessian = np.array([[2.0 * g, e], [e, 2.0 * d]])
        if hessian[0, 0] < 0 and np.linalg.det(hessian) > 0:
            dk, dl = np.linalg.solve(hessian, [-c, -b])
            if abs(dk) <= 0.5 and abs(dl) <= 0.5:
                return k + float(dk), l + float(dl), value
    dk = _parabola_offset(score[k - 1, l], value, score[k + 1, l]) if 0 < k < score.shape[0] - 1 else 0.0
    dl = _parabola_offset(score[k, l - 1], value, score[k, l + 1]) if 0 < l < score.shape[1] - 1 else 0.0
    return k + dk, l + dl, value


def _row_offset(template: np.ndarray, area: np.ndarray, search: int, min_correlation: float) -> Optional[float]:
    """Row of the template's best match in area, relative to the centered position."""
    if not (np.all(np.isfinite(template)) and np.all(np.isfinite(area))) or template.std() < 1e-6:
        return None
    peak = subpixel_peak(match_template(area, template))
    if peak is None or peak[2] < min_correlation:
        return None
    return peak[0] - search


def measure_y_parallax(rect_a: RasterGrid, rect_b: RasterGrid, step: int = 50, patch: int = 15,
                       search: int = 4, min_correlation: float = 0.5,
                       disparity: Optional[Union[RasterGrid, float]] = None,
                       search_cols: Optional[int] = None) -> RasterGrid:
    """
    Vertical offset (row in B minus row in A, px) at grid nodes by 2D NCC
    template search with subpixel peak refinement. Each node is matched
    from A into B and from B back into A and the two offsets are averaged,
    so swapping the images negates the result. With a disparity map the
    search in B is centered on the matched column; a scalar disparity
    shifts every node alike. search_cols widens the column search only.
    """
    search_cols = search if search_cols is None else search_cols
    a = rect_a.values
    b = rect_b.values
    h, w = a.shape
    half = patch // 2
    node_rows = np.arange(step // 2, h, step)
    node_cols = np.arange(step // 2, w, step)
    out = np.full((len(node_rows), len(node_cols)), np.nan)
    for i, r in enumerate(node_rows):
        for j, c in enumerate(node_cols):
            shift = 0
            if isinstance(disparity, (int, float)):
                shift = int(round(disparity))
            elif disparity is not None:
                d = disparity.values[r, c] if disparity.values.shape == a.shape else np.nan
                if not np.isfinite(d):
                    continue
                shift = int(round(d))
            cb = c + shift
            r0, r1 = r - half - search, r + half + search + 1
            if r0 < 0 or r1 > min(h, b.shape[0]):
                continue
            if min(c, cb) - half - search_cols < 0 or c + half + search_cols + 1 > w \
                    or cb + half + search_cols + 1 > b.shape[1]:
                continue
            forward = _row_offset(a[r - half:r + half + 1, c - half:c + half + 1],
                                  b[r0:r1, cb - half - search_cols:cb + half + search_cols + 1],
                                  search, min_correlation)
            if forward is None:
                continue
            backward = _row_offset(b[r - half:r + half + 1, cb - half:cb + half + 1],
                                   a[r0:r1, c - half - search_cols:c + half + search_cols + 1],
                                   search, min_correlation)
            if backward is None:
                continue
            out[i, j] = 0.5 * (forward - backward)
    valid = np.isfinite(out)
    if valid.any():
        logger.info(
            f"y-parallax: {valid.sum()} nodes, mean {np.nanmean(out):.3f} px, SD {np.nanstd(out):.3f} px"
        )
    x0, _, _, y0, _, _ = rect_a.geotransform
    return RasterGrid(out, (x0 + step // 2 - step / 2.0, float(step), 0.0, y0 + step // 2 - step / 2.0, 0.0, float(step)))
