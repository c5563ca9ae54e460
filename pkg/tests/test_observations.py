"""
Tests for observation CSVs, matcher CSVs and tile manifests.
"""
import numpy as np
import pytest

from cosp.errors import DataError, MissingInput
from cosp.geodesy import geodetic_to_ecef_array
from cosp.models import EcefPoint, GcpRecord, MatchSet, PixelPoint, TiePoint, TileSpec
from cosp.observations import (
    group_by_image,
    read_matches,
    read_observations,
    read_tile_manifest,
    write_matches,
    write_observations,
    write_tile_manifest,
)
from cosp.validation import ValidationError


def _gcp(image_id: str, gcp_id: str, role: str = "control") -> GcpRecord:
    ground = EcefPoint.from_array(geodetic_to_ecef_array(96.25, 44.6, 1520.5))
    return GcpRecord(image_id, PixelPoint(101.25, 57.5), ground, sigma_px=2.0, role=role, gcp_id=gcp_id)


class TestObservationCsv:
    """Tests for the GCP/tie-point observation CSV."""

    @pytest.mark.unit
    def test_write_and_read(self, temp_dir):
        gcps = [_gcp("fore", "G1"), _gcp("aft", "G1", "check")]
        ties = [TiePoint("T1", [("fore", PixelPoint(1.0, 2.0)), ("aft", PixelPoint(3.0, 4.0))], sigma_px=0.5)]
        path = temp_dir / "obs.csv"
        write_observations(path, gcps, ties)

        back_gcps, back_ties = read_observations(path)
        assert [g.role for g in back_gcps] == ["control", "check"]
        assert back_gcps[0].gcp_id == "G1"
        assert back_gcps[0].sigma_px == 2.0
        assert back_gcps[0].pixel == PixelPoint(101.25, 57.5)
        assert np.allclose(back_gcps[0].ground.as_array(), gcps[0].ground.as_array(), atol=1e-6)
        assert len(back_ties) == 1
        assert back_ties[0].tie_id == "T1"
        assert back_ties[0].sigma_px == 0.5
        assert back_ties[0].observations[1] == ("aft", PixelPoint(3.0, 4.0))

    @pytest.mark.unit
    def test_default_sigma(self, temp_dir):
        path = temp_dir / "obs.csv"
        path.write_text(
            "image_id,col,row,lon,lat,h,sigma_px,role,tie_id\n"
            "fore,1,2,96.2,44.6,1500,,control,G7\n"
        )
        gcps, ties = read_observations(path)
        assert gcps[0].sigma_px == 1.0
        assert ties == []

    @pytest.mark.unit
    def test_missing_column(self, temp_dir):
        path = temp_dir / "obs.csv"
        path.write_text("image_id,col,row\nfore,1,2\n")
        with pytest.raises(ValidationError, match="missing column"):
            read_observations(path)

    @pytest.mark.unit
    def test_single_image_tie_rejected(self, temp_dir):
        path = temp_dir / "obs.csv"
        path.write_text(
            "image_id,col,row,lon,lat,h,sigma_px,role,tie_id\n"
            "fore,1,2,,,,,tie,T1\n"
            "fore,5,6,,,,,tie,T1\n"
        )
        with pytest.raises(ValidationError, match="distinct images"):
            read_observations(path)

    @pytest.mark.unit
    def test_missing_file(self, temp_dir):
        with pytest.raises(MissingInput):
            read_observations(temp_dir / "none.csv")

    @pytest.mark.unit
    def test_group_by_image(self):
        grouped = group_by_image([_gcp("fore", "G1"), _gcp("aft", "G1"), _gcp("fore", "G2")])
        assert sorted(grouped) == ["aft", "fore"]
        assert [g.gcp_id for g in grouped["fore"]] == ["G1", "G2"]


class TestMatchCsv:
    """Tests for the matcher CSV."""

    @pytest.mark.unit
    def test_round_trip(self, temp_dir):
        matches = MatchSet(["t0", "t1"], [[10.0, 20.0], [30.5, 40.25]], [[96.2, 44.5], [96.3, 44.6]], [0.9, 0.4])
        path = temp_dir / "matches.csv"
        write_matches(path, matches)
        back = read_matches(path)
        assert back.tile_ids == ["t0", "t1"]
        assert np.array_equal(back.corona, matches.corona)
        assert np.array_equal(back.reference, matches.reference)
        assert np.array_equal(back.confidence, matches.confidence)

    @pytest.mark.unit
    def test_empty_file(self, temp_dir):
        path = temp_dir / "matches.csv"
        path.write_text("tile_id,corona_col,corona_row,ref_lon,ref_lat,confidence\n")
        assert len(read_matches(path)) == 0

    @pytest.mark.unit
    def test_bad_rows(self, temp_dir):
        path = temp_dir / "matches.csv"
        path.write_text("tile_id,corona_col,corona_row,ref_lon,ref_lat,confidence\nt0,1,2,96,44,1.2\n")
        with pytest.raises(DataError, match="outside \\[0, 1\\]"):
            read_matches(path)
        path.write_text("tile_id,corona_col,corona_row,ref_lon,ref_lat,confidence\nt0,x,2,96,44,0.5\n")
        with pytest.raises(DataError, match="line 2"):
            read_matches(path)


class TestTileManifest:

    @pytest.mark.unit
    def test_round_trip(self, temp_dir):
        tiles = [
            TileSpec("coarse_000", (0, 0, 2000, 1500), (96.1, 44.5, 96.4, 44.7), 4.0, mode="coarse"),
            TileSpec("fine_000", (0, 0, 1000, 750), (96.1, 44.5, 96.2, 44.6), 1.0),
        ]
        path = temp_dir / "tiles.json"
        write_tile_manifest(path, tiles)
        assert read_tile_manifest(path) == tiles

    @pytest.mark.unit
    def test_invalid_manifest(self, temp_dir):
        path = temp_dir / "tiles.json"
        path.write_text('[{"tile_id": "x"}]')
        with pytest.raises(DataError, match="Invalid tile manifest"):
            read_tile_manifest(path)
