"""
Tests for polynomial epipolar rectification and y-parallax measurement.
"""
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import ndimage

from cosp.errors import (
    DataError,
    DegenerateGeometry,
    IllConditionedFit,
    InsufficientMatches,
    MissingInput,
    ProjectionFailure,
)
from cosp.geodesy import enu_rotation
from cosp.raster import RasterGrid
from cosp.rectify import (
    RectificationModel,
    RectifiedSide,
    build_rectification,
    build_rectification_from_matches,
    estimate_epipolar_directions,
    load_rectification,
    measure_y_parallax,
    monomial_exponents,
    monomials,
    resample_rectified,
    save_rectification,
    subpixel_peak,
    virtual_correspondences,
)
from cosp.synth import reference_dem, render_observations


@pytest.fixture(scope="module")
def desk_height_range(desk_scene):
    values = reference_dem(desk_scene).values
    return float(np.nanmin(values)), float(np.nanmax(values))


@pytest.fixture(scope="module")
def desk_model(desk_scene, desk_height_range):
    return build_rectification(desk_scene.fore, desk_scene.aft, desk_height_range, desk_scene.pitch_um)


def _curved_side() -> RectifiedSide:
    exps = monomial_exponents(3)
    x = np.zeros(len(exps))
    y = np.zeros(len(exps))
    x[exps.index((1, 0))] = 1.0
    y[exps.index((0, 1))] = 1.0
    x[exps.index((2, 0))] = 0.02
    y[exps.index((1, 1))] = -0.03
    y[exps.index((0, 0))] = 0.01
    return RectifiedSide(0.1, (200.0, 150.0), 250.0, 3, x, y, (400, 300))


def _orientation_difference(a: float, b: float) -> float:
    """Difference of two line orientations in degrees, modulo a half turn."""
    return math.degrees((a - b + math.pi / 2) % math.pi - math.pi / 2)


def _shift_east(camera, meters: float):
    """The same camera displaced east of its frame center."""
    position = camera.position0 + meters * enu_rotation(camera.frame_lon, camera.frame_lat)[0]
    return replace(camera, X0=float(position[0]), Y0=float(position[1]), Z0=float(position[2]))


def _texture(height: int, width: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = ndimage.gaussian_filter(rng.normal(size=(height, width)), 2.0)
    return 128.0 + 40.0 * noise / noise.std()


class TestPolynomials:
    """Tests for the monomial basis and one rectified side."""

    @pytest.mark.unit
    def test_exponents(self):
        assert monomial_exponents(2) == [(0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2)]
        assert len(monomial_exponents(4)) == 15
        m = monomials(np.array([2.0]), np.array([3.0]), 2)
        assert m.tolist() == [[1.0, 2.0, 3.0, 4.0, 6.0, 9.0]]

    @pytest.mark.unit
    def test_inverse_undoes_forward(self):
        side = _curved_side()
        cols = np.array([0.0, 57.5, 200.0, 399.0])
        rows = np.array([0.0, 280.25, 150.0, 12.0])
        x, y = side.forward(cols, rows)
        back_cols, back_rows = side.inverse(x, y)
        assert np.allclose(back_cols, cols, atol=1e-6)
        assert np.allclose(back_rows, rows, atol=1e-6)

    @pytest.mark.unit
    def test_coefficient_count_checked(self):
        with pytest.raises(ValueError, match="need 10 coefficients"):
            RectifiedSide(0.0, (0.0, 0.0), 1.0, 3, np.zeros(6), np.zeros(10), (10, 10))

    @pytest.mark.unit
    def test_identity_model(self):
        model = RectificationModel.identity((400, 300))
        x, y = model.a.forward(np.array([10.0, 399.5]), np.array([5.0, 299.5]))
        assert np.allclose(x, [-190.0, 199.5])
        assert np.allclose(y, [-145.0, 149.5])
        assert model.domain == (-200.0, -150.0, 400, 300)
        assert model.is_bijective()
        with pytest.raises(ValueError, match="a\\|b"):
            model.side("c")


class TestModelFiles:

    @pytest.mark.unit
    def test_save_and_load(self, temp_dir):
        model = RectificationModel(_curved_side(), _curved_side(), (-5.0, -3.0, 420, 310), -12.5, 30.0, 0.01, 0.02)
        path = temp_dir / "model.json"
        save_rectification(model, path)
        back = load_rectification(path)
        assert back.domain == model.domain
        assert back.disparity_range() == (-13, 30)
        assert back.disparity_range(margin=2) == (-15, 32)
        assert np.array_equal(back.b.y_coeffs, model.b.y_coeffs)
        assert back.a.size == (400, 300)

    @pytest.mark.unit
    def test_load_errors(self, temp_dir):
        with pytest.raises(MissingInput):
            load_rectification(temp_dir / "none.json")
        path = temp_dir / "bad.json"
        path.write_text('{"a": {}}')
        with pytest.raises(DataError, match="Invalid rectification model"):
            load_rectification(path)


class TestCameraRectification:
    """Rectification of the default synthetic pair from its camera models."""

    @pytest.mark.integration
    def test_heldout_y_parallax(self, desk_model):
        assert desk_model.heldout_rms_px < 0.1
        assert desk_model.fit_rms_px < 0.1
        assert desk_model.is_bijective()
        assert desk_model.disparity_max > desk_model.disparity_min

    @pytest.mark.integration
    def test_corresponding_points_share_rows(self, desk_scene, desk_model):
        truth = render_observations(desk_scene, render=False).truth
        fore = np.array(truth["tie_pixels"]["fore"])
        aft = np.array(truth["tie_pixels"]["aft"])
        _, ya = desk_model.a.forward(fore[:, 0], fore[:, 1])
        _, yb = desk_model.b.forward(aft[:, 0], aft[:, 1])
        assert np.max(np.abs(ya - yb)) < 0.2

    @pytest.mark.integration
    def test_direction_stable_to_grid_density(self, desk_scene, desk_height_range):
        coarse = estimate_epipolar_directions(desk_scene.fore, desk_scene.aft, desk_height_range,
                                              desk_scene.pitch_um, grid=17)
        fine = estimate_epipolar_directions(desk_scene.fore, desk_scene.aft, desk_height_range,
                                            desk_scene.pitch_um, grid=33)
        for a, b in zip(coarse, fine):
            assert abs(_orientation_difference(a, b)) < 0.1
        assert abs(coarse[0] - coarse[1]) <= math.pi / 2

    @pytest.mark.integration
    def test_partial_overlap_still_gives_directions(self, desk_scene, desk_height_range):
        """Grid points outside the other image's footprint do not count as transfer failures."""
        base = estimate_epipolar_directions(desk_scene.fore, desk_scene.aft, desk_height_range, desk_scene.pitch_um)
        shifted = _shift_east(desk_scene.aft, 1500.0)
        angles = estimate_epipolar_directions(desk_scene.fore, shifted, desk_height_range, desk_scene.pitch_um)
        for a, b in zip(base, angles):
            assert abs(_orientation_difference(a, b)) < 2.0

    @pytest.mark.integration
    def test_disjoint_footprints(self, desk_scene, desk_height_range):
        far = _shift_east(desk_scene.aft, 20000.0)
        with pytest.raises(ProjectionFailure, match="fall inside"):
            estimate_epipolar_directions(desk_scene.fore, far, desk_height_range, desk_scene.pitch_um)

    @pytest.mark.integration
    def test_virtual_correspondences_span_heights(self, desk_scene, desk_height_range):
        pa, pb, heights = virtual_correspondences(desk_scene.fore, desk_scene.aft, desk_height_range,
                                                  desk_scene.pitch_um, grid=9, levels=3)
        assert len(pa) == len(pb) == len(heights)
        assert len(np.unique(heights)) == 3
        low, high = desk_height_range
        assert heights.min() < low and heights.max() > high


class TestFeatureRectification:
    """Rectification from image matches alone."""

    @pytest.mark.integration
    def test_from_virtual_matches(self, desk_scene, desk_height_range):
        pa, pb, _ = virtual_correspondences(desk_scene.fore, desk_scene.aft, desk_height_range,
                                            desk_scene.pitch_um, grid=15, levels=5)
        size = desk_scene.image_size
        model = build_rectification_from_matches(pa, pb, size, size)
        assert model.fit_rms_px < 0.2

    @pytest.mark.unit
    def test_small_central_patch_is_well_conditioned(self):
        """Matches spanning a few percent of the image keep tiny high-order monomials solvable."""
        rng = np.random.default_rng(2)
        pa = np.column_stack([rng.uniform(950.0, 1050.0, 120), rng.uniform(700.0, 800.0, 120)])
        relief = 20.0 + 5.0 * np.sin(pa[:, 0] / 7.0) * np.cos(pa[:, 1] / 9.0)
        pb = pa + np.column_stack([relief, np.full(len(pa), 0.5)])
        model = build_rectification_from_matches(pa, pb, (2000, 1500), (2000, 1500))
        assert model.fit_rms_px < 0.01
        with pytest.raises(IllConditionedFit, match="condition"):
            build_rectification_from_matches(pa, pb, (2000, 1500), (2000, 1500), condition_limit=10.0)

    @pytest.mark.unit
    def test_flat_scene(self):
        pa = np.random.default_rng(0).uniform(0, 400, size=(60, 2))
        with pytest.raises(DegenerateGeometry, match="flat"):
            build_rectification_from_matches(pa, pa + np.array([30.0, 2.0]), (400, 300), (400, 300))

    @pytest.mark.unit
    def test_too_few_matches(self):
        pa = np.zeros((10, 2))
        with pytest.raises(InsufficientMatches, match="10 matches for 30"):
            build_rectification_from_matches(pa, pa, (400, 300), (400, 300))


class TestResampling:

    @pytest.mark.unit
    def test_identity_resampling_keeps_pixels(self):
        values = _texture(60, 80)
        model = RectificationModel.identity((80, 60))
        out = resample_rectified(RasterGrid(values), model, "a", jobs=2, block_rows=16)
        assert out.values.shape == (60, 80)
        assert np.allclose(out.values, values, atol=1e-6)

    @pytest.mark.unit
    def test_nodata_propagates(self):
        values = _texture(60, 80)
        values[30, 40] = np.nan
        out = resample_rectified(values, RectificationModel.identity((80, 60)), "b")
        assert np.isnan(out.values[30, 40])
        assert np.isfinite(out.values[10, 10])


class TestYParallax:
    """Tests for the NCC y-parallax measurement."""

    @pytest.mark.unit
    def test_integer_offset(self):
        a = _texture(200, 200, seed=3)
        b = np.roll(a, 2, axis=0)
        grid = measure_y_parallax(RasterGrid(a), RasterGrid(b), step=40)
        valid = grid.values[np.isfinite(grid.values)]
        assert valid.size >= 9
        assert np.allclose(valid, 2.0, atol=0.1)
        assert grid.geotransform[1] == 40.0

    @pytest.mark.unit
    @pytest.mark.parametrize("shift", [(1.0, 0.0), (0.6, 0.3), (-0.35, 0.8)])
    def test_swapping_the_pair_flips_sign(self, shift):
        a = _texture(200, 200, seed=4)
        b = ndimage.shift(a, shift, order=3, mode="nearest")
        forward = measure_y_parallax(RasterGrid(a), RasterGrid(b), step=40)
        backward = measure_y_parallax(RasterGrid(b), RasterGrid(a), step=40)
        both = np.isfinite(forward.values) & np.isfinite(backward.values)
        assert both.sum() >= 9
        assert np.allclose(forward.values[both], -backward.values[both], atol=1e-9)
        assert np.allclose(forward.values[both], shift[0], atol=0.1)

    @pytest.mark.unit
    def test_peak_refined_in_both_axes(self):
        rows, cols = np.mgrid[-3:4, -3:4].astype(float)
        score = 1.0 - 0.05 * ((rows - 0.3) ** 2 + (cols + 0.2) ** 2)
        k, l, value = subpixel_peak(score)
        assert k == pytest.approx(3.3, abs=1e-9)
        assert l == pytest.approx(2.8, abs=1e-9)
        assert value == pytest.approx(score[3, 3])

    @pytest.mark.unit
    def test_border_peak_falls_back_to_parabola(self):
        score = np.array([[0.9, 1.0, 0.9], [0.5, 0.6, 0.5]])
        k, l, _ = subpixel_peak(score)
        assert k == 0.0
        assert l == pytest.approx(1.0)

    @pytest.mark.unit
    def test_scalar_disparity_centers_the_search(self):
        a = _texture(200, 260, seed=5)
        b = np.roll(np.roll(a, 1, axis=0), 10, axis=1)
        grid = measure_y_parallax(RasterGrid(a), RasterGrid(b), step=40, disparity=10.0)
        valid = grid.values[np.isfinite(grid.values)]
        assert valid.size >= 9
        assert np.allclose(valid, 1.0, atol=0.1)

    @pytest.mark.unit
    def test_flat_images_give_no_nodes(self):
        grid = measure_y_parallax(RasterGrid(np.full((100, 100), 5.0)), RasterGrid(np.full((100, 100), 5.0)))
        assert np.all(np.isnan(grid.values))
