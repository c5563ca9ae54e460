"""
Tests for footprints, tile planning, match filtering, footprint refinement,
GCP assembly and the bundled matcher.
"""
import math

import numpy as np
import pytest
from scipy import ndimage

from cosp.errors import (
    DataError,
    FootprintOutsideReference,
    InsufficientMatches,
    MissingInput,
    NodataUnderPoint,
    ResidualTooLarge,
)
from cosp.gcpgen import (
    assemble_gcps,
    dem_heights,
    filter_matches,
    footprint_from_camera,
    footprint_mapping,
    footprint_pixels,
    load_footprints,
    matches_by_image,
    mock_match,
    mock_match_tile,
    plan_tiles,
    raster_geographic_bounds,
    refine_footprint,
    save_footprints,
    shift_footprint,
    tile_image_id,
)
from cosp.geodesy import ecef_to_geodetic_array, geodetic_to_utm, utm_to_geodetic
from cosp.models import FootprintEstimate, GeodeticPoint, MatchSet, TileSpec
from cosp.raster import RasterGrid
from tests.conftest import CENTER_LAT, CENTER_LON, make_camera

SIZE = (4000, 3000)


def _footprint(lon: float = CENTER_LON, lat: float = CENTER_LAT, d: float = 0.1, uncertainty_km: float = 5.0):
    corners = (GeodeticPoint(lon - d, lat + d), GeodeticPoint(lon - d, lat - d),
               GeodeticPoint(lon + d, lat - d), GeodeticPoint(lon + d, lat + d))
    return FootprintEstimate(corners, uncertainty_km)


class TestFootprints:
    """Tests for footprint geometry."""

    @pytest.mark.unit
    def test_mapping_hits_corners(self):
        footprint = _footprint()
        mapping = footprint_mapping(footprint, SIZE)
        lonlat = mapping(footprint_pixels(SIZE))
        expected = np.array([[c.lon, c.lat] for c in footprint.corners])
        assert np.allclose(lonlat, expected, atol=1e-9)
        center = mapping(np.array([[2000.0, 1500.0]]))[0]
        assert center == pytest.approx([CENTER_LON, CENTER_LAT], abs=1e-9)

    @pytest.mark.unit
    def test_from_camera(self):
        camera = make_camera("fore", -15.0)
        footprint = footprint_from_camera(camera, 7.0, height=0.0, uncertainty_km=3.0)
        lon_min, lat_min, lon_max, lat_max = footprint.bounds()
        assert lon_min < CENTER_LON < lon_max
        assert lat_min < CENTER_LAT < lat_max
        across_km = (lon_max - lon_min) * 111.32 * math.cos(math.radians(CENTER_LAT))
        along_km = (lat_max - lat_min) * 111.32
        assert across_km > 3.0 * along_km
        assert all(abs(c.h) < 1e-3 for c in footprint.corners)
        assert footprint.uncertainty_km == 3.0

    @pytest.mark.unit
    def test_shift(self):
        footprint = shift_footprint(_footprint(), 1000.0, -2000.0)
        center = footprint.center()
        assert (center.lon - CENTER_LON) * 111.32 * math.cos(math.radians(CENTER_LAT)) == pytest.approx(1.0, rel=1e-3)
        assert (center.lat - CENTER_LAT) * 111.32 == pytest.approx(-2.0, rel=1e-6)

    @pytest.mark.unit
    def test_save_and_load(self, temp_dir):
        path = temp_dir / "footprints.json"
        footprints = {"fore": _footprint(), "aft": _footprint(d=0.2, uncertainty_km=8.0)}
        save_footprints(path, footprints)
        back = load_footprints(path)
        assert sorted(back) == ["aft", "fore"]
        for key, footprint in footprints.items():
            got = [(c.lon, c.lat, c.h) for c in back[key].corners]
            want = [(c.lon, c.lat, c.h) for c in footprint.corners]
            assert np.allclose(got, want, atol=1e-12)
            assert back[key].uncertainty_km == footprint.uncertainty_km

    @pytest.mark.unit
    def test_load_errors(self, temp_dir):
        with pytest.raises(MissingInput):
            load_footprints(temp_dir / "none.json")
        path = temp_dir / "bad.json"
        path.write_text('{"fore": {"corners": [[1, 2]]}}')
        with pytest.raises(DataError, match="Invalid footprint file"):
            load_footprints(path)

    @pytest.mark.unit
    def test_utm_raster_bounds(self, utm_grid):
        lon_min, lat_min, lon_max, lat_max = raster_geographic_bounds(utm_grid)
        assert lon_min < lon_max and lat_min < lat_max
        lon, lat = utm_to_geodetic([500000.0, 500600.0, 500000.0, 500600.0],
                                   [4900000.0, 4900000.0, 4899500.0, 4899500.0], 47)
        assert (lon_min, lat_min, lon_max, lat_max) == pytest.approx(
            (lon.min(), lat.min(), lon.max(), lat.max()), abs=1e-9)
        # the western edge lies on the zone 47 central meridian
        assert lon_min == pytest.approx(99.0, abs=1e-9)
        assert 44.0 < lat_min < 45.0


class TestPlanTiles:
    """Tests for coarse and fine tile planning."""

    @pytest.mark.unit
    def test_fine_tiles_cover_image(self):
        tiles = plan_tiles(_footprint(), SIZE, "fine", "fore")
        assert len(tiles) == 9
        assert tiles[0].tile_id == "fore:fine:0:0"
        assert tiles[-1].corona_window == (2080, 1560, 1920, 1440)
        assert all(t.scale == 1.0 for t in tiles)
        assert tile_image_id(tiles[4].tile_id) == "fore"

    @pytest.mark.unit
    def test_coarse_tile_is_downscaled(self):
        tiles = plan_tiles(_footprint(), SIZE, "coarse", "aft")
        assert len(tiles) == 1
        assert tiles[0].corona_window == (0, 0, 4000, 3000)
        assert tiles[0].scale == pytest.approx(4000 / 1920)
        lon_min, _, lon_max, _ = tiles[0].reference_window
        fp_min, _, fp_max, _ = _footprint().bounds()
        pad = 5.0 / (111.32 * math.cos(math.radians(CENTER_LAT + 0.1)))
        assert lon_min < fp_min - 0.9 * pad
        assert lon_max > fp_max + 0.9 * pad

    @pytest.mark.unit
    def test_fine_reference_windows_overlap(self):
        tiles = plan_tiles(_footprint(), SIZE, "fine", "fore")
        left, right = tiles[0].reference_window, tiles[1].reference_window
        assert right[0] < left[2]

    @pytest.mark.unit
    def test_footprint_outside_reference(self):
        with pytest.raises(FootprintOutsideReference, match="does not meet the reference"):
            plan_tiles(_footprint(), SIZE, "fine", "fore", reference_bounds=(10.0, 10.0, 11.0, 11.0))

    @pytest.mark.unit
    def test_bad_mode(self):
        with pytest.raises(ValueError, match="coarse\\|fine"):
            plan_tiles(_footprint(), SIZE, "medium")


class TestMatchFiltering:

    @pytest.mark.unit
    def test_threshold_and_per_tile_cap(self):
        matches = MatchSet(
            ["a:fine:0:0"] * 4 + ["b:fine:0:0"] * 2,
            np.arange(12.0).reshape(6, 2),
            np.tile([[96.0, 44.0]], (6, 1)),
            [0.9, 0.3, 0.8, 0.95, 0.6, 0.4],
        )
        filtered = filter_matches(matches, threshold=0.5, max_per_tile=2)
        assert filtered.tile_ids == ["a:fine:0:0", "a:fine:0:0", "b:fine:0:0"]
        assert sorted(filtered.confidence.tolist()) == [0.6, 0.9, 0.95]
        grouped = matches_by_image(filtered)
        assert len(grouped["a"]) == 2
        assert len(grouped["b"]) == 1


class TestRefineFootprint:
    """Tests for the similarity-based footprint refinement."""

    def _truth(self):
        e0, n0 = geodetic_to_utm(np.array([CENTER_LON]), np.array([CENTER_LAT]), 47, True)

        def to_lonlat(pixels):
            e = e0[0] - 7.0 * (pixels[:, 0] - SIZE[0] / 2)
            n = n0[0] - 7.0 * (pixels[:, 1] - SIZE[1] / 2)
            lon, lat = utm_to_geodetic(e, n, 47, True)
            return np.column_stack([lon, lat])
        return to_lonlat

    def _matches(self, count: int, noise_m: float = 0.0, seed: int = 0) -> MatchSet:
        rng = np.random.default_rng(seed)
        corona = rng.uniform([0, 0], SIZE, size=(count, 2))
        lonlat = self._truth()(corona)
        if noise_m:
            lonlat = lonlat + rng.normal(0.0, noise_m / 111320.0, size=lonlat.shape)
        return MatchSet(["fore:coarse:0:0"] * count, corona, lonlat, np.full(count, 0.9))

    @pytest.mark.unit
    def test_corners_move_to_truth(self):
        truth = self._truth()(footprint_pixels(SIZE))
        start = FootprintEstimate(tuple(GeodeticPoint(lon, lat) for lon, lat in truth), 5.0)
        start = shift_footprint(start, 2000.0, -1500.0)
        matches = self._matches(30)
        matches.reference[:3] += 0.05  # three gross outliers
        refined = refine_footprint(start, matches, SIZE)
        got = np.array([[c.lon, c.lat] for c in refined.corners])
        assert np.max(np.abs(got - truth)) < 1e-6
        assert refined.uncertainty_km == pytest.approx(1e-3)

    @pytest.mark.unit
    def test_too_few_matches(self):
        with pytest.raises(InsufficientMatches, match="needs 10 matches, got 5"):
            refine_footprint(_footprint(), self._matches(5), SIZE)

    @pytest.mark.unit
    def test_low_confidence_matches_are_ignored(self):
        matches = self._matches(20)
        matches.confidence[:] = 0.2
        with pytest.raises(InsufficientMatches):
            refine_footprint(_footprint(), matches, SIZE, threshold=0.5)

    @pytest.mark.unit
    def test_residual_exceeds_uncertainty(self):
        matches = self._matches(40, noise_m=40.0, seed=1)
        with pytest.raises(ResidualTooLarge, match="exceeds the prior uncertainty"):
            refine_footprint(_footprint(uncertainty_km=0.01), matches, SIZE)


class TestAssembleGcps:
    """Tests for GCP records from matches."""

    def _matches(self, utm_grid: RasterGrid) -> MatchSet:
        e = np.array([500105.0, 500255.0, 500405.0, 500555.0, 501500.0])
        n = np.array([4899905.0, 4899805.0, 4899605.0, 4899555.0, 4899800.0])
        lon, lat = utm_to_geodetic(e, n, 47, True)
        tiles = ["fore:fine:0:0", "fore:fine:0:1", "aft:fine:0:0", "aft:fine:1:0", "aft:fine:1:1"]
        return MatchSet(tiles, np.arange(10.0).reshape(5, 2), np.column_stack([lon, lat]), np.full(5, 0.8))

    @pytest.mark.unit
    def test_heights_and_split(self, utm_grid):
        matches = self._matches(utm_grid)
        gcps, skipped = assemble_gcps(matches, utm_grid, check_fraction=0.5, seed=42, sigma_px=1.5)
        assert skipped == 1
        assert len(gcps) == 4
        assert [g.image_id for g in gcps] == ["fore", "fore", "aft", "aft"]
        assert sum(g.role == "check" for g in gcps) == 2
        assert [g.gcp_id for g in gcps] == ["M00000", "M00001", "M00002", "M00003"]
        assert all(g.sigma_px == 1.5 for g in gcps)

        heights = dem_heights(utm_grid, matches.reference[:4, 0], matches.reference[:4, 1])
        llh = ecef_to_geodetic_array(np.array([g.ground.as_array() for g in gcps]))
        assert np.allclose(llh[:, 2], heights, atol=1e-3)
        assert np.allclose(llh[:, :2], matches.reference[:4], atol=1e-9)

    @pytest.mark.unit
    def test_split_is_seeded(self, utm_grid):
        matches = self._matches(utm_grid)
        a, _ = assemble_gcps(matches, utm_grid, seed=1)
        b, _ = assemble_gcps(matches, utm_grid, seed=1)
        assert [g.role for g in a] == [g.role for g in b]

    @pytest.mark.unit
    def test_every_match_on_nodata(self, utm_grid):
        full = self._matches(utm_grid)
        outside = MatchSet(full.tile_ids[4:], full.corona[4:], full.reference[4:], full.confidence[4:])
        with pytest.raises(NodataUnderPoint, match="any of the 1 match"):
            assemble_gcps(outside, utm_grid)

    @pytest.mark.unit
    def test_geographic_dem(self):
        dem = RasterGrid(np.full((10, 10), 250.0), (96.0, 0.01, 0.0, 45.0, 0.0, -0.01), crs="EPSG:4326")
        heights = dem_heights(dem, np.array([96.05, 97.0]), np.array([44.95, 44.95]))
        assert heights[0] == pytest.approx(250.0)
        assert np.isnan(heights[1])


class TestBundledMatcher:
    """The bundled matcher recovers correspondences through a misplaced footprint."""

    SIZE = (300, 200)

    @pytest.fixture
    def setup(self):
        rng = np.random.default_rng(21)
        noise = ndimage.gaussian_filter(rng.normal(size=(400, 400)), 2.0)
        values = 128.0 + 40.0 * noise / noise.std()
        reference = RasterGrid(values, (96.0, 1e-4, 0.0, 44.7, 0.0, -1e-4), crs="EPSG:4326")
        image = values[50:250, 50:350]

        def truth(pixels):
            pixels = np.atleast_2d(pixels)
            return np.column_stack([96.005 + pixels[:, 0] * 1e-4, 44.695 - pixels[:, 1] * 1e-4])

        corners = truth(footprint_pixels(self.SIZE) + np.array([3.0, 0.0]))
        footprint = FootprintEstimate(tuple(GeodeticPoint(lon, lat) for lon, lat in corners), 1.0)
        return reference, image, truth, footprint_mapping(footprint, self.SIZE)

    @pytest.mark.integration
    def test_matches_follow_truth(self, setup):
        reference, image, truth, mapping = setup
        tile = TileSpec("fore:fine:0:0", (0, 0, 300, 200), (96.0, 44.66, 96.04, 44.7), 1.0)
        matches = mock_match_tile(tile, image, reference, mapping, grid=4, patch=31, search=10)
        assert len(matches) == 16
        assert np.all(matches.confidence > 0.95)
        error_px = np.abs(matches.reference - truth(matches.corona)) / 1e-4
        assert np.max(error_px) < 0.25

    @pytest.mark.unit
    def test_reference_outside_tile_gives_no_matches(self, setup):
        _, image, _, mapping = setup
        far = RasterGrid(np.ones((50, 50)), (10.0, 1e-4, 0.0, 10.0, 0.0, -1e-4), crs="EPSG:4326")
        tile = TileSpec("fore:fine:0:0", (0, 0, 300, 200), (96.0, 44.66, 96.04, 44.7), 1.0)
        assert len(mock_match_tile(tile, image, far, mapping)) == 0

    @pytest.mark.unit
    def test_multi_tile_run(self, setup):
        reference, image, _, mapping = setup
        tiles = [TileSpec("fore:fine:0:0", (0, 0, 150, 200), (96.0, 44.66, 96.04, 44.7), 1.0),
                 TileSpec("fore:fine:0:1", (150, 0, 150, 200), (96.0, 44.66, 96.04, 44.7), 1.0)]
        matches = mock_match(tiles, {"fore": image}, reference, {"fore": mapping}, grid=3, patch=21, search=8)
        assert set(matches.tile_ids) == {"fore:fine:0:0", "fore:fine:0:1"}
        assert matches.corona[:, 0].max() > 150.0
