"""
Tests for the raster container, bilinear sampling and raster I/O.
"""
import json

import numpy as np
import pytest

from cosp.errors import DataError, MissingInput
from cosp.raster import RasterGrid, bilinear, read_mask, read_raster, write_raster


class TestBilinear:
    """Tests for index-space bilinear interpolation."""

    @pytest.mark.unit
    def test_exact_on_linear_field(self):
        rows, cols = np.mgrid[0:10, 0:12]
        values = 2.0 * cols + 3.0 * rows
        assert float(bilinear(values, 4.25, 6.5)) == pytest.approx(2.0 * 4.25 + 3.0 * 6.5)

    @pytest.mark.unit
    def test_last_sample_is_inside(self):
        values = np.arange(20.0).reshape(4, 5)
        assert float(bilinear(values, 4.0, 3.0)) == pytest.approx(19.0)

    @pytest.mark.unit
    def test_outside_is_nan(self):
        values = np.ones((4, 5))
        out = bilinear(values, np.array([-0.1, 4.1, 2.0]), np.array([1.0, 1.0, 3.5]))
        assert np.all(np.isnan(out))

    @pytest.mark.unit
    def test_nan_neighbor_propagates(self):
        values = np.ones((4, 4))
        values[1, 1] = np.nan
        assert np.isnan(bilinear(values, 0.5, 0.5))
        assert float(bilinear(values, 2.5, 2.5)) == pytest.approx(1.0)


class TestRasterGrid:
    """Tests for geotransform handling."""

    @pytest.mark.unit
    def test_nodata_becomes_nan(self):
        grid = RasterGrid(np.array([[1.0, -9999.0], [3.0, 4.0]]))
        assert np.isnan(grid.values[0, 1])
        assert grid.valid_mask().sum() == 3

    @pytest.mark.unit
    def test_pixel_map_round_trip_with_rotation(self):
        grid = RasterGrid(np.zeros((5, 5)), (100.0, 2.0, 0.5, 200.0, -0.3, -2.0))
        x, y = grid.pixel_to_map(np.array([0.0, 3.2]), np.array([0.0, 1.7]))
        col, row = grid.map_to_pixel(x, y)
        assert np.allclose(col, [0.0, 3.2])
        assert np.allclose(row, [0.0, 1.7])

    @pytest.mark.unit
    def test_cell_centers_sample_back_to_values(self, utm_grid):
        """Sampling at cell centers returns the cell values."""
        x, y = utm_grid.cell_centers()
        assert np.allclose(utm_grid.sample(x, y), utm_grid.values)

    @pytest.mark.unit
    def test_same_grid(self, utm_grid):
        assert utm_grid.same_grid(utm_grid.with_values(np.zeros_like(utm_grid.values)))
        shifted = RasterGrid(utm_grid.values, (500005.0, 10.0, 0.0, 4900000.0, 0.0, -10.0))
        assert not utm_grid.same_grid(shifted)

    @pytest.mark.unit
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError, match="2D"):
            RasterGrid(np.zeros(4))
        with pytest.raises(ValueError, match="nonzero"):
            RasterGrid(np.zeros((2, 2)), (0.0, 0.0, 0.0, 0.0, 0.0, 1.0))


class TestRasterIO:
    """Tests for GeoTIFF and flat-binary raster files."""

    @pytest.mark.unit
    def test_flat_binary_with_sidecar(self, temp_dir, utm_grid):
        values = utm_grid.values.copy()
        values[3, 4] = np.nan
        path = write_raster(utm_grid.with_values(values), temp_dir / "dem.bin")
        sidecar = json.loads((temp_dir / "dem.json").read_text())
        assert sidecar["width"] == 60 and sidecar["height"] == 50
        assert sidecar["crs"] == "EPSG:32647"
        back = read_raster(path)
        assert back.same_grid(utm_grid)
        assert np.isnan(back.values[3, 4])
        assert np.allclose(back.values[0, :5], values[0, :5], atol=1e-3)

    @pytest.mark.unit
    def test_geotiff(self, temp_dir, utm_grid):
        back = read_raster(write_raster(utm_grid, temp_dir / "dem.tif"))
        assert back.same_grid(utm_grid, tol=1e-6)
        assert "32647" in back.crs
        assert np.allclose(back.values, utm_grid.values, atol=1e-3)

    @pytest.mark.unit
    def test_missing_files(self, temp_dir):
        with pytest.raises(MissingInput):
            read_raster(temp_dir / "nope.bin")
        (temp_dir / "lonely.bin").write_bytes(b"\x00" * 16)
        with pytest.raises(MissingInput, match="sidecar"):
            read_raster(temp_dir / "lonely.bin")

    @pytest.mark.unit
    def test_size_mismatch(self, temp_dir):
        (temp_dir / "bad.bin").write_bytes(b"\x00" * 12)
        (temp_dir / "bad.json").write_text(json.dumps({"width": 2, "height": 2, "geotransform": [0, 1, 0, 0, 0, 1]}))
        with pytest.raises(DataError, match="expected 4 samples"):
            read_raster(temp_dir / "bad.bin")

    @pytest.mark.unit
    def test_mask_raster_must_share_grid(self, temp_dir, utm_grid):
        mask = utm_grid.with_values((utm_grid.values > 1500.0).astype(float))
        write_raster(mask, temp_dir / "mask.bin")
        stable = read_mask(temp_dir / "mask.bin", utm_grid)
        assert stable.dtype == bool
        assert stable.sum() == int((utm_grid.values > 1500.0).sum())
        other = RasterGrid(np.ones((10, 10)), utm_grid.geotransform)
        with pytest.raises(DataError, match="not on the DEM grid"):
            read_mask(temp_dir / "mask.bin", other)

    @pytest.mark.unit
    def test_geojson_mask(self, temp_dir, utm_grid):
        polygon = {
            "type": "FeatureCollection",
            "features": [{
                "type": "Feature",
                "properties": {},
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[500000, 4900000], [500200, 4900000], [500200, 4899800],
                                     [500000, 4899800], [500000, 4900000]]],
                },
            }],
        }
        (temp_dir / "stable.geojson").write_text(json.dumps(polygon))
        stable = read_mask(temp_dir / "stable.geojson", utm_grid)
        assert stable[:20, :20].all()
        assert not stable[25:, 25:].any()
