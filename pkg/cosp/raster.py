"""Single-band raster container with geotransform, sampling and file I/O.

Rasters are read and written either as GeoTIFF (rasterio) or as a flat
little-endian float32 grid with a JSON sidecar:
``{width, height, geotransform[6], nodata, crs}``.
"""
import json
import logging
import warnings
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
import rasterio
from rasterio.errors import NotGeoreferencedWarning
from rasterio.transform import Affine

from .errors import DataError, MissingInput

logger = logging.getLogger(__name__)

DEFAULT_NODATA = -9999.0
IDENTITY_GEOTRANSFORM = (0.0, 1.0, 0.0, 0.0, 0.0, 1.0)
TIFF_SUFFIXES = (".tif", ".tiff")

PathLike = Union[str, Path]


@dataclass
class RasterGrid:
    """
    Single-band grid. In memory, invalid cells are NaN; the nodata sentinel
    is only used on disk.

    geotransform follows the GDAL order (x0, dx, rx, y0, ry, dy): the map
    position of continuous pixel coordinate (col, row) is
    x = x0 + col*dx + row*rx, y = y0 + col*ry + row*dy, with pixel centers at
    half-integer coordinates.
    """
    values: np.ndarray
    geotransform: Tuple[float, float, float, float, float, float] = IDENTITY_GEOTRANSFORM
    nodata: float = DEFAULT_NODATA
    crs: Optional[str] = None

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float, copy=True)
        if self.values.ndim != 2:
            raise ValueError(f"RasterGrid needs a 2D array, got shape {self.values.shape}")
        self.geotransform = tuple(float(v) for v in self.geotransform)
        if len(self.geotransform) != 6:
            raise ValueError("geotransform must have 6 terms")
        if self.geotransform[1] == 0.0 or self.geotransform[5] == 0.0:
            raise ValueError("Raster pixel sizes must be nonzero")
        if np.isfinite(self.nodata):
            self.values[self.values == self.nodata] = np.nan

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def pixel_size(self) -> Tuple[float, float]:
        return self.geotransform[1], self.geotransform[5]

    def valid_mask(self) -> np.ndarray:
        return np.isfinite(self.values)

    def with_values(self, values: np.ndarray) -> "RasterGrid":
        return replace(self, values=values)

    def pixel_to_map(self, col: np.ndarray, row: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x0, dx, rx, y0, ry, dy = self.geotransform
        col = np.asarray(col, dtype=float)
        row = np.asarray(row, dtype=float)
        return x0 + col * dx + row * rx, y0 + col * ry + row * dy

    def map_to_pixel(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x0, dx, rx, y0, ry, dy = self.geotransform
        det = dx * dy - rx * ry
        if det == 0.0:
            raise ValueError("Singular geotransform")
        u = np.asarray(x, dtype=float) - x0
        v = np.asarray(y, dtype=float) - y0
        return (dy * u - rx * v) / det, (-ry * u + dx * v) / det

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Map coordinates of all cell centers, each shaped like values."""
        rows, cols = np.mgrid[0:self.height, 0:self.width]
        return self.pixel_to_map(cols + 0.5, rows + 0.5)

    def sample(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Bilinear sample at map coordinates; NaN outside or next to nodata."""
        col, row = self.map_to_pixel(x, y)
        return bilinear(self.values, np.asarray(col) - 0.5, np.asarray(row) - 0.5)

    def same_grid(self, other: "RasterGrid", tol: float = 1e-9) -> bool:
        return (
            self.values.shape == other.values.shape
            and np.allclose(self.geotransform, other.geotransform, atol=tol, rtol=0.0)
        )


def bilinear(values: np.ndarray, col: np.ndarray, row: np.ndarray) -> np.ndarray:
    """
    Bilinear interpolation in array-index space (cell (i, j) at col=j, row=i).

    Points outside [0, w-1] x [0, h-1] and points touching a NaN neighbor
    return NaN.
    """
    values = np.asarray(values, dtype=float)
    h, w = values.shape
    col = np.asarray(col, dtype=float)
    row = np.asarray(row, dtype=float)
    shape = np.broadcast(col, row).shape
    col = np.broadcast_to(col, shape).ravel()
    row = np.broadcast_to(row, shape).ravel()

    out = np.full(col.shape, np.nan)
    inside = (col >= 0) & (col <= w - 1) & (row >= 0) & (row <= h - 1) & np.isfinite(col) & np.isfinite(row)
    if w < 2 or h < 2:
        exact = inside & (col == np.round(col)) & (row == np.round(row))
        out[exact] = values[row[exact].astype(int), col[exact].astype(int)]
        return out.reshape(shape)

    c = col[inside]
    r = row[inside]
    c0 = np.minimum(np.floor(c).astype(int), w - 2)
    r0 = np.minimum(np.floor(r).astype(int), h - 2)
    fc = c - c0
    fr = r - r0
    v00 = values[r0, c0]
    v01 = values[r0, c0 + 1]
    v10 = values[r0 + 1, c0]
    v11 = values[r0 + 1, c0 + 1]
    out[inside] = (
        v00 * (1 - fc) * (1 - fr)
        + v01 * fc * (1 - fr)
        + v10 * (1 - fc) * fr
        + v11 * fc * fr
    )
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def write_raster(grid: RasterGrid, path: PathLike) -> Path:
    """Write a raster as GeoTIFF (.tif/.tiff) or flat float32 + JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.where(np.isfinite(grid.values), grid.values, grid.nodata).astype("<f4")
    try:
        if path.suffix.lower() in TIFF_SUFFIXES:
            profile = {
                "driver": "GTiff",
                "width": grid.width,
                "height": grid.height,
                "count": 1,
                "dtype": "float32",
                "nodata": grid.nodata,
                "transform": Affine.from_gdal(*grid.geotransform),
            }
            if grid.crs:
                profile["crs"] = grid.crs
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotGeoreferencedWarning)
                with rasterio.open(path, "w", **profile) as dst:
                    dst.write(data, 1)
        else:
            path.write_bytes(data.tobytes(order="C"))
            sidecar = {
                "width": grid.width,
                "height": grid.height,
                "geotransform": list(grid.geotransform),
                "nodata": grid.nodata,
                "crs": grid.crs,
            }
            _sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
        logger.debug(f"Wrote raster {grid.width}x{grid.height} to '{path}'")
        return path
    except Exception as e:
        logger.error(f"Error writing raster to '{path}': {e}")
        raise


def read_raster(path: PathLike) -> RasterGrid:
    """
    Read a GeoTIFF / TIFF scan or a flat binary grid with JSON sidecar.

    Raises:
        MissingInput: If the file (or its sidecar) does not exist
        DataError: If the file cannot be decoded
    """
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"Raster not found: {path}")
    if path.suffix.lower() in TIFF_SUFFIXES:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", NotGeoreferencedWarning)
                with rasterio.open(path) as src:
                    data = src.read(1).astype(float)
                    gt = src.transform.to_gdal()
                    nodata = src.nodata if src.nodata is not None else DEFAULT_NODATA
                    crs = src.crs.to_string() if src.crs else None
        except rasterio.errors.RasterioIOError as e:
            logger.error(f"Could not read GeoTIFF '{path}': {e}")
            raise DataError(f"Unreadable raster '{path}': {e}") from e
        return RasterGrid(data, gt, float(nodata), crs)

    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise MissingInput(f"Raster sidecar not found: {sidecar}")
    try:
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        width, height = int(meta["width"]), int(meta["height"])
        data = np.frombuffer(path.read_bytes(), dtype="<f4")
        if data.size != width * height:
            raise ValueError(f"expected {width * height} samples, found {data.size}")
        nodata = float(meta.get("nodata", DEFAULT_NODATA))
        return RasterGrid(
            data.reshape(height, width).astype(float),
            tuple(meta["geotransform"]),
            nodata,
            meta.get("crs"),
        )
    except (json.JSONDecodeError, KeyError, ValueError) as e:
        logger.error(f"Invalid raster '{path}': {e}")
        raise DataError(f"Invalid raster '{path}': {e}") from e


def read_mask(path: PathLike, like: RasterGrid) -> np.ndarray:
    """
    Read a stable-terrain mask aligned with `like`: a raster (nonzero = stable)
    or a GeoJSON polygon file in the raster's CRS.
    """
    path = Path(path)
    if not path.exists():
        raise MissingInput(f"Mask not found: {path}")
    if path.suffix.lower() in (".geojson",):
        from rasterio.features import geometry_mask
        try:
            features = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"Invalid GeoJSON mask '{path}': {e}") from e
        geoms = [f["geometry"] for f in features.get("features", [])]
        if not geoms:
            raise DataError(f"GeoJSON mask '{path}' has no features")
        return geometry_mask(
            geoms,
            out_shape=like.values.shape,
            transform=Affine.from_gdal(*like.geotransform),
            invert=True,
        )
    grid = read_raster(path)
    if not grid.same_grid(like):
        raise DataError(f"Mask '{path}' is not on the DEM grid")
    return np.isfinite(grid.values) & (grid.values != 0)
