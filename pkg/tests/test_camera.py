"""
Tests for the rotating-slit panoramic camera model.
"""
import math
from dataclasses import replace

import numpy as np
import pytest

from cosp.camera import (
    N_PARAMETERS,
    PanoramicCamera,
    backproject_ray,
    backproject_rays,
    camera_from_dict,
    camera_to_dict,
    eo_at,
    expected_along_track_motion,
    expected_attitude_compensation,
    expected_imc,
    film_dimensions_px,
    imc_shift,
    intersect_ellipsoid_height,
    intersect_rays,
    load_camera,
    mm_to_pixel,
    pixel_to_mm,
    pixel_to_point,
    plausibility_report,
    point_to_pixel,
    project,
    project_jacobian,
    project_with_status,
    scan_angle,
    scan_time,
)
from cosp.errors import BehindCamera, DataError, MissingInput
from cosp.geodesy import ecef_to_geodetic_array, euler_to_rotation, geodetic_to_ecef_array
from cosp.models import ImagePointMM
from cosp.validation import ValidationError

from tests.conftest import ALTITUDE_M, CENTER_LAT, CENTER_LON, make_camera


def _ground_grid(n: int = 5, spread_deg: float = 0.3, h: float = 1500.0) -> np.ndarray:
    lon, lat = np.meshgrid(np.linspace(-spread_deg, spread_deg, n), np.linspace(-0.1, 0.1, n))
    return geodetic_to_ecef_array(CENTER_LON + lon.ravel(), CENTER_LAT + lat.ravel(), np.full(lon.size, h))


class TestModelPieces:
    """Tests for scan angle, scan time and IMC shift."""

    @pytest.mark.unit
    def test_scan_time_is_linear_in_x(self, fore_camera):
        length = fore_camera.film_half_length_mm
        assert scan_time(-length, fore_camera) == pytest.approx(0.0)
        assert scan_time(0.0, fore_camera) == pytest.approx(0.5)
        assert scan_time(length, fore_camera) == pytest.approx(1.0)

    @pytest.mark.unit
    def test_scan_angle(self):
        assert scan_angle(609.6, 609.6) == pytest.approx(1.0)
        with pytest.raises(ValueError):
            scan_angle(1.0, 0.0)

    @pytest.mark.unit
    def test_imc_shift_vanishes_at_center(self, fore_camera):
        assert imc_shift(fore_camera, 0.0) == pytest.approx(0.0)
        assert imc_shift(fore_camera, 0.3) == pytest.approx(
            -fore_camera.imc * fore_camera.f_mm * math.sin(0.3) * math.cos(fore_camera.omega0)
        )

    @pytest.mark.unit
    def test_exterior_orientation_moves_linearly(self):
        camera = replace(make_camera("fore"), X01=600.0, omega01=0.002)
        start, r0 = eo_at(camera, 0.0)
        end, r1 = eo_at(camera, 1.0)
        assert np.allclose(end.as_array() - start.as_array(), [600.0, 0.0, 0.0], atol=1e-6)
        assert np.allclose(r0 @ r0.T, np.eye(3), atol=1e-12)
        assert np.allclose(r1, euler_to_rotation(camera.omega0 + 0.002, camera.phi0, camera.kappa0) @ camera.frame_rotation(),
                           atol=1e-12)

    @pytest.mark.unit
    def test_half_field_limit(self):
        with pytest.raises(ValueError, match="half field"):
            PanoramicCamera(0.0, 0.0, 7e6, film_half_length_mm=400.0)


class TestProjection:
    """Tests for ground -> image projection and its inverse."""

    @pytest.mark.unit
    def test_boresight_hits_format_center(self):
        """A static camera tilted toward the center images it at (0, 0)."""
        camera = make_camera("fore", -15.0)
        center = geodetic_to_ecef_array(CENTER_LON, CENTER_LAT, 0.0)
        point = project(camera, center)
        assert isinstance(point, ImagePointMM)
        assert point.x_p == pytest.approx(0.0, abs=1e-6)
        assert point.y_p == pytest.approx(0.0, abs=1e-6)

    @pytest.mark.unit
    def test_point_east_of_center_by_hand(self):
        """A static camera: x_p = f atan(-Nx/Nz), y_p = -f cos(x_p/f) Ny/Nz, east is +x."""
        camera = make_camera("fore", -15.0)
        ground = geodetic_to_ecef_array(96.30, 44.62, 1500.0)
        rotation = euler_to_rotation(camera.omega0, camera.phi0, camera.kappa0) @ camera.frame_rotation()
        nx, ny, nz = rotation @ (ground - camera.position0)
        x_expected = camera.f_mm * math.atan(-nx / nz)
        y_expected = -camera.f_mm * math.cos(x_expected / camera.f_mm) * ny / nz

        point = project(camera, ground)
        assert point.x_p == pytest.approx(x_expected, abs=1e-9)
        assert point.y_p == pytest.approx(y_expected, abs=1e-9)
        assert point.x_p == pytest.approx(16.5487, abs=0.05)
        west = project(camera, geodetic_to_ecef_array(96.18, 44.62, 1500.0))
        assert west.x_p < 0.0 < point.x_p

    @pytest.mark.unit
    def test_project_backproject_round_trip(self, fore_camera):
        """Ground -> image -> ray: the ray passes within a micrometer of the ground point."""
        ground = _ground_grid(h=1500.0)
        xy = project(fore_camera, ground)
        origins, directions = backproject_rays(fore_camera, xy)
        offsets = ground - origins
        along = np.einsum("ni,ni->n", offsets, directions)
        assert np.all(along > 0)
        closest = origins + along[:, None] * directions
        assert np.max(np.linalg.norm(closest - ground, axis=1)) < 1e-6

    @pytest.mark.unit
    def test_offset_ellipsoid_intersection(self, fore_camera):
        """Rays hit the offset ellipsoid close to the requested geodetic height."""
        xy = np.array([[0.0, 0.0], [100.0, 10.0]])
        origins, directions = backproject_rays(fore_camera, xy)
        llh = ecef_to_geodetic_array(intersect_ellipsoid_height(origins, directions, 1500.0))
        assert np.allclose(llh[:, 2], 1500.0, atol=1.0)

    @pytest.mark.unit
    def test_full_film_length_round_trip(self, fore_camera):
        """Points near both film ends (t near 0 and 1) still round trip."""
        length = fore_camera.film_half_length_mm
        xy = np.array([[-0.95 * length, 10.0], [0.95 * length, -12.0], [0.0, 20.0]])
        origins, directions = backproject_rays(fore_camera, xy)
        ground = intersect_ellipsoid_height(origins, directions, 800.0)
        assert np.allclose(project(fore_camera, ground), xy, atol=1e-6)

    @pytest.mark.unit
    def test_ray_points_toward_earth(self, fore_camera):
        origin, direction = backproject_ray(fore_camera, ImagePointMM(0.0, 0.0))
        assert np.dot(direction, origin.as_array()) < 0

    @pytest.mark.unit
    def test_point_behind_camera(self, fore_camera):
        """A point far above the camera is behind it."""
        above = fore_camera.position0 * 1.5
        with pytest.raises(BehindCamera):
            project(fore_camera, above)
        xy, ok = project_with_status(fore_camera, np.vstack([above, _ground_grid(2)]))
        assert not ok[0]
        assert np.all(np.isnan(xy[0]))
        assert ok[1:].all()

    @pytest.mark.unit
    def test_jacobian_matches_finite_differences(self, fore_camera):
        ground = _ground_grid(3)
        xy, j_cam, j_ground, ok = project_jacobian(fore_camera, ground)
        assert ok.all()
        assert j_cam.shape == (9, 2, N_PARAMETERS)
        params = fore_camera.parameters()
        steps = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1e-7, 1e-7, 1e-7, 1e-7, 1e-7, 1e-7, 1e-6])
        for k in range(N_PARAMETERS):
            delta = np.zeros(N_PARAMETERS)
            delta[k] = steps[k]
            plus = project(fore_camera.with_parameters(params + delta), ground)
            minus = project(fore_camera.with_parameters(params - delta), ground)
            numeric = (plus - minus) / (2 * steps[k])
            scale = max(1e-6, float(np.max(np.abs(numeric))))
            assert np.max(np.abs(j_cam[:, :, k] - numeric)) / scale < 1e-3, f"parameter {k}"
        for k in range(3):
            delta = np.zeros(3)
            delta[k] = 1.0
            numeric = (project(fore_camera, ground + delta) - project(fore_camera, ground - delta)) / 2.0
            assert np.allclose(j_ground[:, :, k], numeric, rtol=1e-3, atol=1e-9)


class TestIntersection:

    @pytest.mark.unit
    def test_stereo_rays_meet_at_ground(self, stereo_cameras):
        ground = geodetic_to_ecef_array(CENTER_LON + 0.01, CENTER_LAT - 0.005, 1234.0)
        origins, directions = [], []
        for camera in stereo_cameras:
            xy = project(camera, ground)
            o, d = backproject_ray(camera, xy)
            origins.append(o.as_array())
            directions.append(d)
        point, miss = intersect_rays(np.array(origins), np.array(directions))
        assert np.linalg.norm(point - ground) < 1e-3
        assert miss < 1e-3

    @pytest.mark.unit
    def test_ellipsoid_miss_is_nan(self):
        origin = np.array([[7e6, 0.0, 0.0]])
        outward = np.array([[1.0, 0.0, 0.0]])
        assert np.all(np.isnan(intersect_ellipsoid_height(origin, outward, 0.0)))


class TestFilmPixels:
    """Tests for the mm <-> pixel conversion."""

    @pytest.mark.unit
    def test_full_film_dimensions(self, fore_camera):
        """The full 745 x 56 mm format at 7 um."""
        assert film_dimensions_px(fore_camera, 7.0) == (106429, 8000)

    @pytest.mark.unit
    def test_center_and_axes(self):
        cols, rows, inside = mm_to_pixel([[0.0, 0.0], [0.7, 0.7]], 7.0, 2000, 1500)
        assert cols.tolist() == pytest.approx([1000.0, 1100.0])
        assert rows.tolist() == pytest.approx([750.0, 650.0])
        assert inside.all()

    @pytest.mark.unit
    def test_outside_is_flagged_not_clamped(self):
        cols, _, inside = mm_to_pixel([[10.0, 0.0]], 7.0, 2000, 1500)
        assert cols[0] > 2000
        assert not inside[0]

    @pytest.mark.unit
    def test_pixel_to_mm_inverts(self):
        xy = np.array([[1.23, -4.56], [-3.0, 2.0]])
        cols, rows, _ = mm_to_pixel(xy, 7.0, 2000, 1500)
        assert np.allclose(pixel_to_mm(cols, rows, 7.0, 2000, 1500), xy)

    @pytest.mark.unit
    def test_single_point_helpers(self):
        pixel, inside = point_to_pixel(ImagePointMM(0.7, 0.7), 7.0, 2000, 1500)
        assert (pixel.col, pixel.row) == pytest.approx((1100.0, 650.0))
        assert inside
        point = pixel_to_point(pixel, 7.0, 2000, 1500)
        assert (point.x_p, point.y_p) == pytest.approx((0.7, 0.7))

    @pytest.mark.unit
    def test_bad_pitch(self):
        with pytest.raises(ValueError, match="pitch"):
            pixel_to_mm([0.0], [0.0], 0.0, 10, 10)


class TestPlausibility:
    """Tests for the IMC and motion expectations."""

    @pytest.mark.unit
    def test_expected_imc(self):
        assert expected_imc(7700.0, 170000.0, 3.3) == pytest.approx(0.0137, rel=0.02)

    @pytest.mark.unit
    def test_along_track_motion(self):
        assert expected_along_track_motion(7700.0, 0.36) == pytest.approx(2772.0)

    @pytest.mark.unit
    def test_attitude_compensation(self):
        angle = expected_attitude_compensation(7700.0, 0.36, 170000.0)
        assert math.degrees(angle) == pytest.approx(0.93, abs=0.05)

    @pytest.mark.unit
    def test_report_recognizes_lens_translation(self, fore_camera):
        report = plausibility_report(fore_camera)
        assert report["imc_mechanism"] == "lens-translation"
        assert report["along_track_motion_expected_m"] == pytest.approx(2772.0)
        assert report["along_track_motion_m"] > 0

    @pytest.mark.unit
    def test_report_recognizes_camera_rotation(self):
        angle = expected_attitude_compensation(7700.0, 0.36, ALTITUDE_M)
        camera = make_camera("fore", -15.0, omega01=angle)
        assert plausibility_report(camera)["imc_mechanism"] == "camera-rotation"


class TestCameraFiles:
    """Tests for camera JSON files."""

    @pytest.mark.unit
    def test_dict_round_trip(self, fore_camera):
        back = camera_from_dict(camera_to_dict(fore_camera, 7.0))
        assert back == fore_camera
        assert back.metadata == fore_camera.metadata

    @pytest.mark.unit
    def test_save_and_load(self, temp_dir, fore_camera):
        from cosp.camera import save_camera
        save_camera(fore_camera, temp_dir / "cams" / "fore.json", pitch_um=7.0)
        camera, pitch = load_camera(temp_dir / "cams" / "fore.json")
        assert camera == fore_camera
        assert pitch == 7.0

    @pytest.mark.unit
    def test_load_missing_and_invalid(self, temp_dir):
        with pytest.raises(MissingInput):
            load_camera(temp_dir / "none.json")
        (temp_dir / "bad.json").write_text("{not json")
        with pytest.raises(DataError):
            load_camera(temp_dir / "bad.json")

    @pytest.mark.unit
    def test_missing_parameter_rejected(self, fore_camera):
        record = camera_to_dict(fore_camera)
        del record["parameters"]["imc"]
        with pytest.raises(ValidationError, match="imc"):
            camera_from_dict(record)

    @pytest.mark.unit
    def test_with_parameters_shape(self, fore_camera):
        with pytest.raises(ValueError, match="13"):
            fore_camera.with_parameters(np.zeros(12))
        moved = fore_camera.with_parameters(fore_camera.parameters() + 1.0)
        assert moved.X0 == pytest.approx(fore_camera.X0 + 1.0)
        assert replace(moved, X0=fore_camera.X0).X0 == fore_camera.X0
