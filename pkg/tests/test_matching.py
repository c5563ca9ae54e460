"""
Tests for census costs, path aggregation and semi-global matching.
"""
import numpy as np
import pytest
from scipy import ndimage

from cosp.errors import DataError
from cosp.matching import (
    DisparityMap,
    aggregate,
    census_transform,
    disparity_to_points,
    hamming,
    sgm_match,
)
from cosp.raster import RasterGrid, read_raster


def _texture(height: int, width: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.normal(size=(height, width)), 1.5)
    return 128.0 + 40.0 * noise / noise.std()


def _shifted_pair(disparity_of_row, height: int = 120, width: int = 200, seed: int = 0):
    """B such that A column x on row y sits at column x + d(y) in B."""
    a = _texture(height, width, seed)
    rows, cols = np.mgrid[0:height, 0:width].astype(float)
    d = disparity_of_row(rows)
    b = ndimage.map_coordinates(a, [rows, cols - d], order=3, mode="nearest")
    return a, b, d


class TestCensus:

    @pytest.mark.unit
    def test_window_must_be_odd_and_fit(self):
        with pytest.raises(ValueError, match="odd"):
            census_transform(np.zeros((10, 10)), 6)
        with pytest.raises(ValueError):
            census_transform(np.zeros((10, 10)), 9)

    @pytest.mark.unit
    def test_flat_image_has_zero_codes(self):
        codes, valid = census_transform(np.full((12, 12), 3.0), 5)
        assert codes.dtype == np.uint64
        assert not codes.any()
        assert valid[2:-2, 2:-2].all()
        assert not valid[0, 0]

    @pytest.mark.unit
    def test_nodata_invalidates_the_window(self):
        values = _texture(20, 20)
        values[10, 10] = np.nan
        _, valid = census_transform(values, 5)
        assert not valid[8:13, 8:13].any()
        assert valid[3, 3]
        assert valid[10, 14]

    @pytest.mark.unit
    def test_hamming(self):
        a = np.array([0b1011, 2 ** 63], dtype=np.uint64)
        b = np.array([0, 0], dtype=np.uint64)
        assert hamming(a, b).tolist() == [3, 1]


class TestAggregate:

    @pytest.mark.unit
    def test_no_penalties_sum_the_raw_costs(self):
        volume = np.random.default_rng(1).integers(0, 48, size=(6, 7, 5)).astype(np.uint8)
        assert np.array_equal(aggregate(volume, 0, 0, paths=4), 4 * volume.astype(np.int32))

    @pytest.mark.unit
    def test_penalties_smooth_a_noisy_minimum(self):
        volume = np.full((1, 9, 3), 10, dtype=np.uint8)
        volume[0, :, 1] = 0
        volume[0, 4, :] = [0, 5, 10]   # a single cell prefers disparity 0
        total = aggregate(volume, 8, 32, paths=2)
        assert np.argmin(total[0, 4]) == 1

    @pytest.mark.unit
    def test_bad_path_count(self):
        with pytest.raises(ValueError, match="paths must be 1..8"):
            aggregate(np.zeros((2, 2, 2), dtype=np.uint8), 1, 2, paths=9)


class TestSgmMatch:
    """Tests for semi-global matching on synthetic pairs."""

    @pytest.mark.integration
    def test_constant_disparity(self):
        a, b, _ = _shifted_pair(lambda rows: np.full_like(rows, 5.0))
        result = sgm_match(RasterGrid(a), RasterGrid(b), 0, 10)
        interior = result.values[10:-10, 10:-20]
        valid = np.isfinite(interior)
        assert valid.mean() > 0.95
        assert np.median(interior[valid]) == pytest.approx(5.0, abs=0.1)

    @pytest.mark.integration
    def test_smooth_disparity_field(self):
        """Known smooth disparity: RMS error below half a pixel on > 95% valid cells."""
        a, b, d = _shifted_pair(lambda rows: 4.0 + 3.0 * np.sin(2.0 * np.pi * rows / 120.0), seed=2)
        result = sgm_match(RasterGrid(a), RasterGrid(b), 0, 10, tile_size=64, jobs=2)
        interior = result.values[10:-10, 10:-20]
        truth = d[10:-10, 10:-20]
        valid = np.isfinite(interior)
        assert valid.mean() > 0.95
        rms = float(np.sqrt(np.mean((interior[valid] - truth[valid]) ** 2)))
        assert rms < 0.5
        assert result.d_min == 0 and result.d_max == 10

    @pytest.mark.unit
    def test_flat_texture_is_invalid(self):
        a = _texture(60, 80)
        a[:, :40] = 100.0
        result = sgm_match(RasterGrid(a), RasterGrid(a), -2, 2)
        assert np.all(np.isnan(result.values[10:50, 5:30]))
        assert np.isfinite(result.values[10:50, 50:75]).mean() > 0.9

    @pytest.mark.unit
    def test_errors(self):
        with pytest.raises(DataError, match="share rows"):
            sgm_match(RasterGrid(np.zeros((10, 10))), RasterGrid(np.zeros((12, 10))), 0, 2)
        with pytest.raises(ValueError, match="Empty disparity range"):
            sgm_match(RasterGrid(np.zeros((10, 10))), RasterGrid(np.zeros((10, 10))), 3, 2)


class TestDisparityPoints:

    @pytest.mark.unit
    def test_points_on_the_rectified_grid(self):
        grid = RasterGrid(np.array([[1.0, np.nan], [2.0, -0.5]]), (-10.0, 1.0, 0.0, 5.0, 0.0, 1.0))
        xy_a, xy_b = disparity_to_points(DisparityMap(grid, -1, 2))
        assert xy_a.tolist() == [[-9.5, 5.5], [-9.5, 6.5], [-8.5, 6.5]]
        assert xy_b.tolist() == [[-8.5, 5.5], [-7.5, 6.5], [-9.0, 6.5]]

    @pytest.mark.unit
    def test_save(self, temp_dir):
        grid = RasterGrid(np.array([[1.0, np.nan], [2.0, 3.0]]))
        disparity = DisparityMap(grid, 0, 3)
        assert disparity.valid_fraction == 0.75
        disparity.save(temp_dir / "disparity.bin")
        back = read_raster(temp_dir / "disparity.bin")
        assert np.isnan(back.values[0, 1])
        assert back.values[1, 1] == 3.0
