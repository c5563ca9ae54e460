"""
Tests for rotations, geodetic/ECEF/UTM conversion and NMAD.
"""
import math

import numpy as np
import pytest

from cosp.errors import GeodesyError
from cosp.geodesy import (
    NMAD_FACTOR,
    ecef_to_geodetic,
    ecef_to_geodetic_array,
    ecef_to_utm,
    enu_rotation,
    euler_rotation_derivatives,
    euler_to_rotation,
    geodetic_to_ecef,
    geodetic_to_ecef_array,
    geodetic_to_utm,
    is_rotation,
    nmad,
    rotation_to_euler,
    utm_epsg,
    utm_to_ecef,
    utm_to_geodetic,
    utm_zone_for,
)
from cosp.models import EcefPoint, GeodeticPoint


class TestRotations:
    """Tests for omega-phi-kappa rotation matrices."""

    @pytest.mark.unit
    def test_identity_at_zero(self):
        assert np.allclose(euler_to_rotation(0.0, 0.0, 0.0), np.eye(3))

    @pytest.mark.unit
    def test_round_trip(self):
        """Angles survive matrix construction and decomposition."""
        angles = (0.3, -0.4, 1.2)
        rotation = euler_to_rotation(*angles)
        assert is_rotation(rotation)
        assert np.allclose(rotation_to_euler(rotation), angles, atol=1e-12)

    @pytest.mark.unit
    def test_order_is_kappa_phi_omega(self):
        """A pure omega rotation leaves the x axis fixed."""
        rotation = euler_to_rotation(0.5, 0.0, 0.0)
        assert np.allclose(rotation @ [1.0, 0.0, 0.0], [1.0, 0.0, 0.0])

    @pytest.mark.unit
    def test_derivatives_match_finite_differences(self):
        angles = np.array([0.2, -0.1, 0.7])
        eps = 1e-7
        for i, analytic in enumerate(euler_rotation_derivatives(*angles)):
            step = np.zeros(3)
            step[i] = eps
            numeric = (euler_to_rotation(*(angles + step)) - euler_to_rotation(*(angles - step))) / (2 * eps)
            assert np.allclose(analytic, numeric, atol=1e-6)

    @pytest.mark.unit
    def test_non_finite_angles_rejected(self):
        with pytest.raises(ValueError, match="Non-finite"):
            euler_to_rotation(float("nan"), 0.0, 0.0)

    @pytest.mark.unit
    def test_is_rotation_rejects_reflection(self):
        assert not is_rotation(np.diag([1.0, 1.0, -1.0]))

    @pytest.mark.unit
    def test_enu_up_axis_points_away_from_center(self):
        up = enu_rotation(96.24, 44.59)[2]
        position = geodetic_to_ecef_array(96.24, 44.59, 0.0)
        assert np.dot(up, position / np.linalg.norm(position)) > 0.99


class TestGeodeticConversion:
    """Tests for WGS84 geodetic <-> ECEF."""

    @pytest.mark.unit
    def test_equator_prime_meridian(self):
        xyz = geodetic_to_ecef_array(0.0, 0.0, 0.0)
        assert np.allclose(xyz, [6378137.0, 0.0, 0.0])

    @pytest.mark.unit
    def test_round_trip_grid(self):
        """Geodetic -> ECEF -> geodetic is exact to well under a millimeter."""
        lon, lat = np.meshgrid(np.linspace(-179, 179, 9), np.linspace(-85, 85, 9))
        h = np.full(lon.shape, 170000.0)
        back = ecef_to_geodetic_array(geodetic_to_ecef_array(lon, lat, h).reshape(-1, 3))
        assert np.allclose(back[:, 0], lon.ravel(), atol=1e-9)
        assert np.allclose(back[:, 1], lat.ravel(), atol=1e-9)
        assert np.allclose(back[:, 2], h.ravel(), atol=1e-4)

    @pytest.mark.unit
    def test_matches_closed_form(self):
        a, f = 6378137.0, 1.0 / 298.257223563
        e2 = f * (2.0 - f)
        lon, lat, h = math.radians(96.24), math.radians(44.59), 1500.0
        n = a / math.sqrt(1.0 - e2 * math.sin(lat) ** 2)
        expected = [(n + h) * math.cos(lat) * math.cos(lon), (n + h) * math.cos(lat) * math.sin(lon),
                    (n * (1.0 - e2) + h) * math.sin(lat)]
        assert np.allclose(geodetic_to_ecef_array(96.24, 44.59, 1500.0), expected, rtol=0.0, atol=1e-6)

    @pytest.mark.unit
    def test_grid_shapes_survive(self):
        lon, lat = np.meshgrid(np.linspace(96.0, 96.5, 4), np.linspace(44.0, 44.5, 3))
        xyz = geodetic_to_ecef_array(lon, lat, 1500.0)
        assert xyz.shape == (3, 4, 3)
        llh = ecef_to_geodetic_array(xyz)
        assert llh.shape == (3, 4, 3)
        assert np.allclose(llh[..., 2], 1500.0, atol=1e-6)

    @pytest.mark.unit
    def test_single_point_wrappers(self):
        point = GeodeticPoint(96.24, 44.59, 1500.0)
        ecef = geodetic_to_ecef(point)
        assert isinstance(ecef, EcefPoint)
        back = ecef_to_geodetic(ecef)
        assert back.lon == pytest.approx(96.24, abs=1e-9)
        assert back.lat == pytest.approx(44.59, abs=1e-9)
        assert back.h == pytest.approx(1500.0, abs=1e-4)

    @pytest.mark.unit
    def test_near_center_rejected(self):
        """Points within a kilometer of the Earth's center have no geodetic position."""
        with pytest.raises(GeodesyError):
            ecef_to_geodetic_array(np.array([[10.0, 20.0, 30.0]]))


class TestUtm:
    """Tests for the UTM hooks."""

    @pytest.mark.unit
    def test_zone_and_epsg(self):
        assert utm_zone_for(96.24) == 47
        assert utm_epsg(47) == 32647
        assert utm_epsg(47, north=False) == 32747

    @pytest.mark.unit
    def test_round_trip(self):
        e, n = geodetic_to_utm(96.24, 44.59, 47)
        lon, lat = utm_to_geodetic(e, n, 47)
        assert float(lon) == pytest.approx(96.24, abs=1e-8)
        assert float(lat) == pytest.approx(44.59, abs=1e-8)

    @pytest.mark.unit
    def test_ecef_round_trip(self):
        xyz = geodetic_to_ecef_array([96.2, 96.3], [44.5, 44.6], [1400.0, 1650.0])
        enh = ecef_to_utm(xyz, 47)
        assert np.allclose(utm_to_ecef(enh, 47), xyz, atol=1e-3)


class TestNmad:
    """Tests for the normalized median absolute deviation."""

    @pytest.mark.unit
    def test_standard_normal(self):
        """NMAD of a large standard normal sample is 1."""
        values = np.random.default_rng(0).standard_normal(1_000_000)
        assert nmad(values) == pytest.approx(1.0, abs=0.01)

    @pytest.mark.unit
    def test_ignores_nodata(self):
        values = np.array([1.0, 2.0, 3.0, np.nan, np.inf])
        assert nmad(values) == pytest.approx(NMAD_FACTOR * 1.0)

    @pytest.mark.unit
    def test_robust_to_outliers(self):
        values = np.concatenate([np.random.default_rng(1).standard_normal(10000), [1e6] * 50])
        assert nmad(values) == pytest.approx(1.0, abs=0.05)

    @pytest.mark.unit
    def test_too_few_values(self):
        with pytest.raises(ValueError, match="at least 2"):
            nmad([1.0, math.nan])
