"""Test fixtures and utilities shared across test modules."""
import math
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from cosp.camera import PanoramicCamera
from cosp.config import SynthOptions
from cosp.geodesy import enu_rotation, geodetic_to_ecef_array
from cosp.raster import RasterGrid
from cosp.synth import make_stereo_scene

CENTER_LON = 96.24
CENTER_LAT = 44.59
ALTITUDE_M = 170000.0


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    with tempfile.TemporaryDirectory() as tmpdir:
        yield Path(tmpdir)


def make_camera(look: str = "fore", omega_deg: float = -15.0, **overrides) -> PanoramicCamera:
    """Camera 170 km above the test center, tilted along track so its boresight hits the center."""
    ground = geodetic_to_ecef_array(CENTER_LON, CENTER_LAT, 0.0)
    omega = math.radians(omega_deg)
    offset = np.array([0.0, ALTITUDE_M * math.tan(omega), ALTITUDE_M])
    position = ground + enu_rotation(CENTER_LON, CENTER_LAT).T @ offset
    params = dict(
        X0=float(position[0]), Y0=float(position[1]), Z0=float(position[2]),
        omega0=omega,
        frame_lon=CENTER_LON,
        frame_lat=CENTER_LAT,
        image_id=look,
        metadata={"look": look},
    )
    params.update(overrides)
    return PanoramicCamera(**params)


@pytest.fixture
def fore_camera():
    """Full-format fore camera with nonzero rates and IMC."""
    return make_camera(
        "fore", -15.0,
        X01=-1200.0, Y01=2100.0, Z01=800.0,
        omega01=2e-4, phi01=-1e-4, kappa01=5e-5,
        imc=0.0137,
    )


@pytest.fixture
def stereo_cameras():
    """Static fore/aft pair converging on the test center (30 deg)."""
    return make_camera("fore", -15.0), make_camera("aft", 15.0)


@pytest.fixture(scope="session")
def small_synth_options():
    """A quick desk scene: 400x300 px films."""
    return replace(SynthOptions(), width=400, height=300, hills=4, gcps=30, ties=30)


@pytest.fixture(scope="session")
def small_scene(small_synth_options):
    return make_stereo_scene(small_synth_options, seed=7)


@pytest.fixture(scope="session")
def desk_scene():
    """The default desk-scale scene (2000x1500 px)."""
    return make_stereo_scene(SynthOptions(), seed=42)


@pytest.fixture
def utm_grid():
    """A 60x50 UTM raster with a smooth surface, 10 m cells, north-up."""
    rows, cols = np.mgrid[0:50, 0:60]
    values = 1500.0 + 20.0 * np.sin(cols / 9.0) + 15.0 * np.cos(rows / 7.0)
    return RasterGrid(values, (500000.0, 10.0, 0.0, 4900000.0, 0.0, -10.0), crs="EPSG:32647")
