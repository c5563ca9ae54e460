"""
Tests for intersection, DEM gridding, elevation differences and tile-wise
coregistration.
"""
import math

import numpy as np
import pytest

from cosp.camera import pixel_to_mm
from cosp.errors import DisjointGrids, DivergentPoint, NearParallelRays, NoStableTerrain
from cosp.geodesy import ecef_to_geodetic_array, nmad
from cosp.models import Affine3D, ImagePointMM
from cosp.raster import RasterGrid
from cosp.surface import (
    TileTransform,
    blend_transforms,
    coregister_tiles,
    dh_stats,
    elevation_difference,
    fill_gaps_hypsometric,
    filter_points,
    grid_dem,
    grid_enh,
    plan_coregistration_tiles,
    triangulate,
    triangulate_points,
)
from cosp.synth import ground_to_pixels, reference_dem, render_observations

SHIFT = (15.0, -10.0, 4.0)


@pytest.fixture(scope="module")
def desk_truth(desk_scene):
    return render_observations(desk_scene, render=False).truth


@pytest.fixture(scope="module")
def fine_reference(desk_scene):
    return reference_dem(desk_scene, cell=5.0)


@pytest.fixture(scope="module")
def shifted_dem(desk_scene):
    return reference_dem(desk_scene, cell=5.0, offset=SHIFT)


def _to_mm(scene, pixels) -> np.ndarray:
    w, h = scene.image_size
    pixels = np.asarray(pixels, dtype=float)
    return pixel_to_mm(pixels[:, 0], pixels[:, 1], scene.pitch_um, w, h)


class TestTriangulation:
    """Tests for two-ray intersection."""

    @pytest.mark.integration
    def test_noiseless_points_are_exact(self, desk_scene, desk_truth):
        xy_fore = _to_mm(desk_scene, desk_truth["tie_pixels"]["fore"])
        xy_aft = _to_mm(desk_scene, desk_truth["tie_pixels"]["aft"])
        truth = np.array(desk_truth["tie_ground"])
        points, miss, ok = triangulate_points(desk_scene.fore, desk_scene.aft, xy_fore, xy_aft)
        assert ok.all()
        assert np.max(np.linalg.norm(points - truth, axis=1)) < 1e-6
        assert np.max(miss) < 1e-4

    @pytest.mark.integration
    def test_single_correspondence(self, desk_scene, desk_truth):
        fore = _to_mm(desk_scene, desk_truth["tie_pixels"]["fore"][:1])[0]
        aft = _to_mm(desk_scene, desk_truth["tie_pixels"]["aft"][:1])[0]
        point, miss = triangulate(desk_scene.fore, desk_scene.aft,
                                  ImagePointMM(*fore), ImagePointMM(*aft))
        assert np.linalg.norm(point.as_array() - np.array(desk_truth["tie_ground"][0])) < 1e-6
        assert miss < 1e-4

    @pytest.mark.unit
    def test_same_ray_twice_is_parallel(self, stereo_cameras):
        fore, _ = stereo_cameras
        with pytest.raises(NearParallelRays):
            triangulate(fore, fore, ImagePointMM(1.0, 2.0), ImagePointMM(1.0, 2.0))

    @pytest.mark.integration
    def test_rays_passing_far_apart(self, desk_scene, desk_truth):
        """A 1 mm shift across the baseline puts the aft ray ~280 m off the fore ray."""
        fore = _to_mm(desk_scene, desk_truth["tie_pixels"]["fore"][:1])[0]
        aft = _to_mm(desk_scene, desk_truth["tie_pixels"]["aft"][:1])[0]
        _, miss = triangulate(desk_scene.fore, desk_scene.aft, ImagePointMM(*fore),
                              ImagePointMM(aft[0] + 1.0, aft[1]), max_miss_m=1000.0)
        assert miss > 200.0
        with pytest.raises(DivergentPoint, match="apart"):
            triangulate(desk_scene.fore, desk_scene.aft, ImagePointMM(*fore),
                        ImagePointMM(aft[0] + 1.0, aft[1]), max_miss_m=100.0)

    @pytest.mark.integration
    def test_shift_along_baseline_keeps_rays_coplanar(self, desk_scene, desk_truth):
        """Moving along the epipolar direction changes the height, not the miss distance."""
        fore = _to_mm(desk_scene, desk_truth["tie_pixels"]["fore"][:1])[0]
        aft = _to_mm(desk_scene, desk_truth["tie_pixels"]["aft"][:1])[0]
        _, miss = triangulate(desk_scene.fore, desk_scene.aft, ImagePointMM(*fore),
                              ImagePointMM(aft[0], aft[1] + 0.01))
        assert miss < 5.0

    @pytest.mark.integration
    def test_vertical_error_follows_base_to_height(self, desk_scene):
        """1 px noise: height scatter matches the convergent-pair prediction."""
        ground = desk_scene.center_ground()[None, :]
        fore_px, ok_fore = ground_to_pixels(desk_scene, desk_scene.fore, ground)
        aft_px, ok_aft = ground_to_pixels(desk_scene, desk_scene.aft, ground)
        assert ok_fore[0] and ok_aft[0]

        n = 4000
        rng = np.random.default_rng(11)
        xy_fore = _to_mm(desk_scene, fore_px + rng.normal(0.0, 1.0, (n, 2)))
        xy_aft = _to_mm(desk_scene, aft_px + rng.normal(0.0, 1.0, (n, 2)))
        points, _, ok = triangulate_points(desk_scene.fore, desk_scene.aft, xy_fore, xy_aft)
        assert ok.all()
        heights = ecef_to_geodetic_array(points)[:, 2]

        gsd = desk_scene.ground_sample_distance()
        half = desk_scene.options.stereo_angle / 2.0
        exact = gsd * math.sqrt(2.0) / math.sin(2.0 * half)
        from_ratio = gsd * math.sqrt(2.0) / desk_scene.base_to_height()
        assert desk_scene.base_to_height() == pytest.approx(0.536, abs=0.01)
        assert np.std(heights) == pytest.approx(exact, rel=0.1)
        assert np.std(heights) == pytest.approx(from_ratio, rel=0.15)


class TestPointFilter:

    @pytest.mark.unit
    def test_miss_distance_against_pixel_footprint(self, stereo_cameras):
        fore, _ = stereo_cameras
        center = fore.position0
        below = center - 170000.0 * center / np.linalg.norm(center)
        points = np.array([below, below, below, [np.nan] * 3])
        keep = filter_points(points, np.array([0.5, 50.0, np.nan, 0.0]), fore, 7.0)
        assert keep.tolist() == [True, False, False, False]


class TestGridding:
    """Tests for robust point-cloud gridding."""

    @pytest.mark.integration
    def test_dem_matches_analytic_terrain(self, desk_scene):
        terrain = desk_scene.terrain
        e0, n0 = terrain.origin_e, terrain.origin_n
        like = terrain.raster((e0 - 600.0, n0 - 400.0, e0 + 600.0, n0 + 400.0), 10.0)
        x0, _, _, y1, _, _ = like.geotransform
        # five samples per cell along each axis, symmetric about the cell center
        offsets = np.arange(1.0, 10.0, 2.0)
        e = x0 + (np.arange(like.width)[:, None] * 10.0 + offsets).ravel()
        n = y1 - (np.arange(like.height)[:, None] * 10.0 + offsets).ravel()
        ee, nn = np.meshgrid(e, n)
        points = terrain.ground_points(ee.ravel(), nn.ravel())

        dem = grid_dem(points, terrain.zone, terrain.north, cell=10.0, like=like)
        assert dem.same_grid(like)
        assert np.isfinite(dem.values).all()
        error = (dem.values - like.values)[1:-1, 1:-1]
        assert float(np.sqrt(np.mean(error ** 2))) < 0.5

    @pytest.mark.unit
    def test_outliers_do_not_reach_the_grid(self):
        e, n = np.meshgrid(np.arange(0.5, 50.0, 1.0), np.arange(0.5, 50.0, 1.0))
        h = np.full(e.shape, 100.0)
        h[25, 25] = 5000.0
        dem = grid_enh(np.column_stack([e.ravel(), n.ravel(), h.ravel()]), cell=10.0)
        assert np.nanmax(dem.values) == 100.0
        assert dem.geotransform[1] == 10.0 and dem.geotransform[5] == -10.0

    @pytest.mark.unit
    def test_empty_cloud(self):
        with pytest.raises(ValueError, match="empty point cloud"):
            grid_enh(np.full((3, 3), np.nan), cell=10.0)
        with pytest.raises(ValueError, match="empty point cloud"):
            grid_dem(np.zeros((0, 3)), 47)


class TestDifferences:
    """Tests for dh statistics and hypsometric gap filling."""

    @pytest.mark.unit
    def test_constant_offset(self, utm_grid):
        dem = utm_grid.with_values(utm_grid.values + 2.0)
        dem.values[0, :10] = np.nan
        report = dh_stats(dem, utm_grid, stable_mask="all")
        assert report.median == pytest.approx(2.0)
        assert report.nmad == pytest.approx(0.0, abs=1e-9)
        assert report.count == 60 * 50 - 10
        assert report.valid_fraction == pytest.approx((3000 - 10) / 3000)
        assert report.to_dict()["stable_mask"] == "all"

    @pytest.mark.unit
    def test_mask_and_filtering(self, utm_grid):
        rng = np.random.default_rng(3)
        dh = rng.normal(0.5, 1.0, utm_grid.values.shape)
        dh[:5, :5] = 80.0
        dem = utm_grid.with_values(utm_grid.values + dh)
        report = dh_stats(dem, utm_grid)
        assert report.nmad_filtered <= report.nmad + 0.01
        assert report.median_filtered == pytest.approx(0.5, abs=0.1)
        assert report.nmad_filtered == pytest.approx(1.0, abs=0.1)

        mask = np.zeros(utm_grid.values.shape, dtype=bool)
        mask[10:20, 10:30] = True
        masked = dh_stats(dem, utm_grid, mask)
        assert masked.count == 200
        assert masked.median == pytest.approx(float(np.median(dh[mask])))

    @pytest.mark.unit
    def test_grid_checks(self, utm_grid):
        other = RasterGrid(utm_grid.values, (500005.0, 10.0, 0.0, 4900000.0, 0.0, -10.0), crs=utm_grid.crs)
        with pytest.raises(DisjointGrids):
            elevation_difference(other, utm_grid)
        with pytest.raises(DisjointGrids, match="Mask shape"):
            dh_stats(utm_grid, utm_grid, np.ones((3, 3), dtype=bool))

    @pytest.mark.unit
    def test_hypsometric_filling(self, utm_grid):
        rng = np.random.default_rng(5)
        values = utm_grid.values + 3.0 + rng.normal(0.0, 0.1, utm_grid.values.shape)
        values[20:30, 20:30] = np.nan
        values[5, 5] += 100.0
        filled = fill_gaps_hypsometric(utm_grid.with_values(values), utm_grid, band_width=50.0)
        assert np.isfinite(filled.values).all()
        gap = filled.values[20:30, 20:30] - utm_grid.values[20:30, 20:30]
        assert np.allclose(gap, 3.0, atol=0.2)
        assert filled.values[5, 5] - utm_grid.values[5, 5] == pytest.approx(3.0, abs=0.2)

    @pytest.mark.unit
    def test_filling_needs_data(self, utm_grid):
        empty = utm_grid.with_values(np.full(utm_grid.values.shape, np.nan))
        assert fill_gaps_hypsometric(empty, utm_grid) is empty


class TestTileLayout:

    @pytest.mark.unit
    def test_plan_tiles(self):
        tiles = plan_coregistration_tiles((100, 250), 10.0, 1000.0, 0.25)
        assert tiles == [(0, 100, 0, 100), (0, 100, 75, 175), (0, 100, 150, 250)]
        assert plan_coregistration_tiles((40, 40), 10.0, 20000.0, 0.25) == [(0, 40, 0, 40)]

    @pytest.mark.unit
    def test_blending_feathers_the_overlap(self):
        first = TileTransform("T000", (0, 10, 0, 12), np.zeros(3),
                              Affine3D(np.eye(3), [1.0, 0.0, 0.0]))
        second = TileTransform("T001", (0, 10, 8, 20), np.zeros(3),
                               Affine3D(np.eye(3), [3.0, 0.0, 0.0]))
        matrix, translation, weight = blend_transforms((10, 20), [first, second], ramp=4.0)
        assert np.allclose(matrix, np.eye(3))
        assert translation[5, 0, 0] == pytest.approx(1.0)
        assert translation[5, 19, 0] == pytest.approx(3.0)
        assert translation[5, 10, 0] == pytest.approx(0.375 * 1.0 + 0.625 * 3.0)
        assert (weight > 0).all()

    @pytest.mark.unit
    def test_tile_record(self):
        tile = TileTransform("T004", (0, 5, 0, 5), np.array([10.0, 20.0, 30.0]),
                             Affine3D(np.eye(3), [1.0, 2.0, 3.0]))
        record = tile.to_dict()
        assert record["tile"] == "T004"
        assert record["local_translation"] == [1.0, 2.0, 3.0]
        assert record["inherited"] is False


class TestCoregistration:
    """Tile-wise 3D affine coregistration against the analytic terrain."""

    @pytest.mark.slow
    def test_recovers_injected_shift(self, shifted_dem, fine_reference):
        corrected, report, tiles = coregister_tiles(shifted_dem, fine_reference, tile_size_m=50000.0)
        assert len(tiles) == 1
        tile = tiles[0]
        assert not tile.inherited and not tile.reverted
        assert np.max(np.abs(tile.local_translation + np.array(SHIFT))) < 0.05
        assert tile.transform.is_small()
        assert tile.nmad_after < tile.nmad_before
        assert report.nmad < 0.1
        assert corrected.same_grid(fine_reference)
        assert report.tile_transforms[0]["tile"] == "T000"

    @pytest.mark.slow
    def test_tiles_never_get_worse(self, shifted_dem, fine_reference):
        before = dh_stats(shifted_dem, fine_reference)
        _, report, tiles = coregister_tiles(shifted_dem, fine_reference, tile_size_m=3000.0,
                                            overlap=0.25, jobs=2)
        assert len(tiles) > 1
        for tile in tiles:
            if not tile.inherited:
                assert tile.nmad_after <= tile.nmad_before + 1e-6
        assert report.nmad < before.nmad
        assert set(report.flagged_tiles) == {t.tile_id for t in tiles if t.inherited or t.reverted}

    @pytest.mark.slow
    def test_statistics_over_stable_mask(self, shifted_dem, fine_reference):
        mask = np.zeros(shifted_dem.values.shape, dtype=bool)
        mask[::2] = True
        _, report, _ = coregister_tiles(shifted_dem, fine_reference, mask, tile_size_m=50000.0,
                                        stable_mask_name="alternate rows")
        assert report.count == int(mask.sum())
        assert report.stable_mask == "alternate rows"

    @pytest.mark.unit
    def test_no_stable_terrain(self, utm_grid):
        mask = np.zeros(utm_grid.values.shape, dtype=bool)
        with pytest.raises(NoStableTerrain):
            coregister_tiles(utm_grid, utm_grid, mask, tile_size_m=200.0)

    @pytest.mark.unit
    def test_disjoint_inputs(self, utm_grid):
        small = RasterGrid(utm_grid.values[:10], utm_grid.geotransform, crs=utm_grid.crs)
        with pytest.raises(DisjointGrids):
            coregister_tiles(small, utm_grid)
        with pytest.raises(DisjointGrids, match="Stable mask"):
            coregister_tiles(utm_grid, utm_grid, np.ones((2, 2), dtype=bool))


class TestNmad:

    @pytest.mark.unit
    def test_standard_normal_samples(self):
        assert nmad(np.random.default_rng(0).standard_normal(1_000_000)) == pytest.approx(1.0, abs=0.01)
