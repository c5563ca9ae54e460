"""Observation files: GCP/tie-point CSV, matcher CSV and tile manifests."""
import csv
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .errors import DataError, MissingInput
from .geodesy import ecef_to_geodetic_array, geodetic_to_ecef_array
from .models import EcefPoint, GcpRecord, MatchSet, PixelPoint, TiePoint, TileSpec
from .validation import ValidationError, validate_observation_row

logger = logging.getLogger(__name__)

OBSERVATION_FIELDS = ["image_id", "col", "row", "lon", "lat", "h", "sigma_px", "role", "tie_id"]
MATCH_FIELDS = ["tile_id", "corona_col", "corona_row", "ref_lon", "ref_lat", "confidence"]

PathLike = Union[str, Path]


def _fmt(value: float) -> str:
    return repr(float(value))


def write_observations(filepath: PathLike, gcps: Sequence[GcpRecord], tiepoints: Sequence[TiePoint] = ()) -> None:
    """Write GCPs and tie points to the observation CSV."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    try:
        rows = []
        if gcps:
            llh = ecef_to_geodetic_array(np.array([g.ground.as_array() for g in gcps]))
            for g, (lon, lat, h) in zip(gcps, llh):
                rows.append({
                    "image_id": g.image_id,
                    "col": _fmt(g.pixel.col),
                    "row": _fmt(g.pixel.row),
                    "lon": _fmt(lon),
                    "lat": _fmt(lat),
                    "h": _fmt(h),
                    "sigma_px": _fmt(g.sigma_px),
                    "role": g.role,
                    "tie_id": g.gcp_id,
                })
        for tp in tiepoints:
            for image_id, pixel in tp.observations:
                rows.append({
                    "image_id": image_id,
                    "col": _fmt(pixel.col),
                    "row": _fmt(pixel.row),
                    "lon": "",
                    "lat": "",
                    "h": "",
                    "sigma_px": _fmt(tp.sigma_px),
                    "role": "tie",
                    "tie_id": tp.tie_id,
                })
        with open(filepath, "w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=OBSERVATION_FIELDS)
            writer.writeheader()
            writer.writerows(rows)
        logger.info(f"Wrote {len(gcps)} GCPs and {len(tiepoints)} tie points to '{filepath}'")
    except Exception as e:
        logger.error(f"Error writing observations to '{filepath}': {e}")
        raise


def read_observations(filepath: PathLike) -> Tuple[List[GcpRecord], List[TiePoint]]:
    """
    Read the observation CSV. GCP rows carry lon/lat/h; tie rows share a tie_id
    and leave the ground fields empty. In GCP rows, tie_id holds the GCP id.

    Raises:
        MissingInput: If the file does not exist
        ValidationError: If a row is malformed
    """
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Observation file not found: {filepath}")
    gcp_rows = []
    ties: "OrderedDict[str, List[Tuple[str, PixelPoint, float]]]" = OrderedDict()
    with open(filepath, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in OBSERVATION_FIELDS[:8] if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{filepath}: missing column(s): {', '.join(missing)}")
        for line_num, row in enumerate(reader, 2):
            validate_observation_row(row, line_num)
            sigma = float(row["sigma_px"]) if row.get("sigma_px") else 1.0
            pixel = PixelPoint(float(row["col"]), float(row["row"]))
            if row["role"] == "tie":
                ties.setdefault(row["tie_id"].strip(), []).append((row["image_id"].strip(), pixel, sigma))
            else:
                gcp_rows.append((row, pixel, sigma))

    gcps: List[GcpRecord] = []
    if gcp_rows:
        xyz = geodetic_to_ecef_array(
            [float(r["lon"]) for r, _, _ in gcp_rows],
            [float(r["lat"]) for r, _, _ in gcp_rows],
            [float(r["h"]) for r, _, _ in gcp_rows],
        )
        for (row, pixel, sigma), p in zip(gcp_rows, xyz):
            gcps.append(GcpRecord(
                image_id=row["image_id"].strip(),
                pixel=pixel,
                ground=EcefPoint.from_array(p),
                sigma_px=sigma,
                role=row["role"],
                gcp_id=(row.get("tie_id") or "").strip(),
            ))
    tiepoints = []
    for tie_id, obs in ties.items():
        try:
            tiepoints.append(TiePoint(tie_id, [(img, px) for img, px, _ in obs], sigma_px=obs[0][2]))
        except ValueError as e:
            raise ValidationError(f"{filepath}: {e}") from e
    logger.info(f"Loaded {len(gcps)} GCPs and {len(tiepoints)} tie points from '{filepath}'")
    return gcps, tiepoints


def write_matches(filepath: PathLike, matches: MatchSet) -> None:
    """Write a matcher CSV (tile_id, corona_col, corona_row, ref_lon, ref_lat, confidence)."""
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(MATCH_FIELDS)
        for tid, (c, r), (lon, lat), conf in zip(matches.tile_ids, matches.corona, matches.reference, matches.confidence):
            writer.writerow([tid, _fmt(c), _fmt(r), _fmt(lon), _fmt(lat), _fmt(conf)])
    logger.info(f"Wrote {len(matches)} matches to '{filepath}'")


def read_matches(filepath: PathLike) -> MatchSet:
    """
    Read a matcher CSV produced by an external matcher (or the mock matcher).

    Raises:
        MissingInput: If the file does not exist
        DataError: If a row cannot be parsed
    """
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Match file not found: {filepath}")
    tile_ids, corona, reference, confidence = [], [], [], []
    with open(filepath, "r", newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in MATCH_FIELDS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValidationError(f"{filepath}: missing column(s): {', '.join(missing)}")
        for line_num, row in enumerate(reader, 2):
            try:
                tile_ids.append(row["tile_id"].strip())
                corona.append((float(row["corona_col"]), float(row["corona_row"])))
                reference.append((float(row["ref_lon"]), float(row["ref_lat"])))
                conf = float(row["confidence"])
            except (TypeError, ValueError) as e:
                raise DataError(f"{filepath}: line {line_num}: {e}") from e
            if not 0.0 <= conf <= 1.0:
                raise DataError(f"{filepath}: line {line_num}: confidence {conf} outside [0, 1]")
            confidence.append(conf)
    logger.info(f"Loaded {len(tile_ids)} matches from '{filepath}'")
    return MatchSet(tile_ids, np.array(corona).reshape(-1, 2), np.array(reference).reshape(-1, 2), np.array(confidence))


def write_tile_manifest(filepath: PathLike, tiles: Sequence[TileSpec]) -> None:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, "w", encoding="utf-8") as f:
        json.dump([t.to_dict() for t in tiles], f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(tiles)} tiles to '{filepath}'")


def read_tile_manifest(filepath: PathLike) -> List[TileSpec]:
    filepath = Path(filepath)
    if not filepath.exists():
        raise MissingInput(f"Tile manifest not found: {filepath}")
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            records = json.load(f)
        return [
            TileSpec(
                tile_id=r["tile_id"],
                corona_window=tuple(int(v) for v in r["corona_window"]),
                reference_window=tuple(float(v) for v in r["reference_window"]),
                scale=float(r["scale"]),
                mode=r.get("mode", "fine"),
                resampling=r.get("resampling", "area-average"),
            )
            for r in records
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        logger.error(f"Invalid tile manifest '{filepath}': {e}")
        raise DataError(f"Invalid tile manifest '{filepath}': {e}") from e


def group_by_image(gcps: Sequence[GcpRecord]) -> Dict[str, List[GcpRecord]]:
    grouped: Dict[str, List[GcpRecord]] = {}
    for g in gcps:
        grouped.setdefault(g.image_id, []).append(g)
    return grouped
