"""
Stage runner: every CLI verb maps to one stage function that reads its
inputs from the config and the run directory, writes its artifacts under
<run_dir>/<stage dir>/ and leaves a provenance record behind.
"""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .adjustment import bundle_adjust, initialize_cameras, residual_field
from .camera import PanoramicCamera, load_camera, pixel_to_mm, save_camera
from .config import PipelineConfig, config_to_dict
from .errors import (
    ConfigError,
    DataError,
    DisjointGrids,
    InsufficientMatches,
    MissingInput,
    ResidualTooLarge,
)
from .filmprep import FilmRecord, clip_pixels, load_film_record, load_scan, prepare_film, save_film_record
from .gcpgen import (
    assemble_gcps,
    filter_matches,
    footprint_mapping,
    load_footprints,
    mock_match,
    plan_tiles,
    raster_geographic_bounds,
    refine_footprint,
    save_footprints,
)
from .geodesy import ecef_to_utm, utm_zone_for
from .matching import DisparityMap, disparity_to_points, sgm_match
from .models import FootprintEstimate, GcpRecord, GeodeticPoint, PixelPoint, TiePoint
from .observations import read_matches, read_observations, read_tile_manifest, write_matches, write_observations, write_tile_manifest
from .output import write_csv, write_json
from .raster import RasterGrid, read_mask, read_raster, write_raster
from .rectify import build_rectification, load_rectification, measure_y_parallax, resample_rectified, save_rectification
from .surface import coregister_tiles, dh_stats, elevation_difference, fill_gaps_hypsometric, filter_points, grid_dem, triangulate_points
from .synth import make_stereo_scene, write_dataset
from .utils import derived_seed, file_sha256
from .validation import validate_image_ids

logger = logging.getLogger(__name__)

STAGES = ("synth", "filmprep", "gcp-plan", "gcp-assemble", "adjust", "rectify", "match", "dem", "coregister", "report")
STAGE_DIRS = {
    "synth": "synth",
    "filmprep": "filmprep",
    "gcp-plan": "gcp",
    "gcp-assemble": "gcp",
    "adjust": "adjust",
    "rectify": "rectify",
    "match": "match",
    "dem": "dem",
    "coregister": "coregister",
    "report": "report",
}
BENDING_AB_FIELDS = ["variant", "sigma0_px", "rmse_x_m", "rmse_y_m", "rmse_z_m"]


@dataclass
class StageContext:
    """Bookkeeping for one stage execution."""
    name: str
    config: PipelineConfig
    jobs: int = 1
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def run_dir(self) -> Path:
        return self.config.run_dir

    @property
    def stage_dir(self) -> Path:
        return self.run_dir / STAGE_DIRS[self.name]

    def path(self, *parts: str) -> Path:
        return self.run_dir.joinpath(*parts)

    def use(self, path: Union[str, Path]) -> Path:
        """Declare an input file; it must exist and is hashed into the provenance."""
        path = Path(path)
        if not path.exists():
            raise MissingInput(f"Stage '{self.name}' needs '{path}'")
        if path.is_file():
            self.inputs[str(path)] = file_sha256(path)
        return path

    def produced(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        self.outputs.append(str(path))
        return path


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def _required(value: Optional[str], key: str) -> str:
    if not value:
        raise ConfigError(f"Config key '{key}' is required for this stage")
    return value


def _pair(config: PipelineConfig):
    if len(config.images) < 2:
        raise ConfigError(f"A stereo stage needs two images, config lists {len(config.images)}")
    return config.images[0], config.images[1]


def _film(ctx: StageContext, image_id: str) -> Tuple[RasterGrid, FilmRecord]:
    raster = read_raster(ctx.use(ctx.path("filmprep", f"{image_id}.tif")))
    record = load_film_record(ctx.use(ctx.path("filmprep", f"{image_id}.json")))
    return raster, record


def _records(ctx: StageContext) -> Dict[str, FilmRecord]:
    return {spec.id: load_film_record(ctx.use(ctx.path("filmprep", f"{spec.id}.json"))) for spec in ctx.config.images}


def _input_footprints(ctx: StageContext) -> Dict[str, FootprintEstimate]:
    config = ctx.config
    from_file = load_footprints(ctx.use(config.paths.footprints)) if config.paths.footprints else {}
    footprints = {}
    for spec in config.images:
        if spec.footprint:
            corners = tuple(GeodeticPoint(lon, lat, 0.0) for lon, lat in spec.footprint)
            footprints[spec.id] = FootprintEstimate(corners, spec.uncertainty_km)
        elif spec.id in from_file:
            footprints[spec.id] = from_file[spec.id]
        else:
            raise MissingInput(f"No footprint for image '{spec.id}' (images[].footprint or paths.footprints)")
    return footprints


def _footprints(ctx: StageContext) -> Dict[str, FootprintEstimate]:
    """Refined footprints from gcp-plan when present, else the configured priors."""
    refined = ctx.path("gcp", "footprints.json")
    if refined.exists():
        return load_footprints(ctx.use(refined))
    return _input_footprints(ctx)


def _cameras(ctx: StageContext, image_ids: Sequence[str]) -> List[PanoramicCamera]:
    return [load_camera(ctx.use(ctx.path("adjust", "cameras", f"{i}.json")))[0] for i in image_ids]


def _utm(config: PipelineConfig, camera: PanoramicCamera) -> Tuple[int, bool]:
    zone = config.run.utm_zone or utm_zone_for(camera.frame_lon)
    return zone, config.run.utm_north


def on_grid(grid: RasterGrid, like: RasterGrid, label: str = "raster") -> RasterGrid:
    """`grid` bilinearly resampled onto the cells of `like` (same CRS required)."""
    if grid.same_grid(like, tol=1e-6):
        return grid
    if grid.crs and like.crs and grid.crs != like.crs:
        raise DisjointGrids(f"The {label} is in {grid.crs}, the DEM in {like.crs}")
    x, y = like.cell_centers()
    logger.debug(f"Resampling the {label} onto the DEM grid")
    return like.with_values(grid.sample(x, y))


def _reference_dem(ctx: StageContext) -> RasterGrid:
    return read_raster(ctx.use(_required(ctx.config.paths.reference_dem, "paths.reference_dem")))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_synth(ctx: StageContext) -> None:
    config = ctx.config
    scene = make_stereo_scene(config.synth, config.run.seed)
    written = write_dataset(scene, ctx.stage_dir, clip_pixels(config.synth.pitch_um, config.filmprep.clip_m), ctx.jobs)
    for path in written.values():
        ctx.produced(path)
    ctx.metadata.update({
        "convergence_deg": math.degrees(scene.convergence_angle()),
        "base_to_height": scene.base_to_height(),
        "gsd_m": scene.ground_sample_distance(),
    })


def stage_filmprep(ctx: StageContext) -> None:
    config = ctx.config
    if not config.images:
        raise ConfigError("No images configured")
    scans_dir = Path(_required(config.paths.scans_dir, "paths.scans_dir"))
    options = config.filmprep
    films = {}
    for spec in config.images:
        scene = spec.scan or spec.id
        for part in sorted(scans_dir.glob(f"{scene}*")):
            if part.suffix.lower() in (".tif", ".tiff", ".bin"):
                ctx.use(part)
        final, record = prepare_film(
            load_scan(scans_dir, scene), spec.id, spec.look, config.camera.pitch_um,
            bending_correction=options.bending_correction, align=options.align, clip_m=options.clip_m,
            median_window=options.median_window, sigma=options.gaussian_sigma, max_gap=options.max_trace_gap,
            window=options.stitch_window, scan_overlap_px=options.scan_overlap_px,
        )
        ctx.produced(write_raster(final, ctx.stage_dir / f"{spec.id}.tif"))
        save_film_record(record, ctx.produced(ctx.stage_dir / f"{spec.id}.json"))
        films[spec.id] = {
            "stripes_found": record.stripes_found,
            "bending_corrected": record.bending_corrected,
            "rail_holes": {edge: len(holes) for edge, holes in record.rail_holes.items()},
            "misalignment": record.misalignment,
        }
    ctx.metadata["films"] = films


def _mock_inputs(ctx: StageContext, footprints: Mapping[str, FootprintEstimate]):
    images, mappings = {}, {}
    for spec in ctx.config.images:
        raster, record = _film(ctx, spec.id)
        images[spec.id] = raster.values
        mappings[spec.id] = footprint_mapping(footprints[spec.id], record.final_size)
    return images, mappings


def stage_gcp_plan(ctx: StageContext) -> None:
    config = ctx.config
    options = config.gcp
    reference = read_raster(ctx.use(_required(config.paths.reference_image, "paths.reference_image")))
    reference_bounds = raster_geographic_bounds(reference)
    priors = _input_footprints(ctx)
    sizes = dict(tile_size=(options.tile_width, options.tile_height),
                 coarse_size=(options.coarse_width, options.coarse_height),
                 fine_overlap=options.fine_overlap)

    refined: Dict[str, FootprintEstimate] = {}
    coarse_all, fine_all = [], []
    for spec in config.images:
        raster, record = _film(ctx, spec.id)
        size = record.final_size
        footprint = priors[spec.id]
        coarse = plan_tiles(footprint, size, "coarse", spec.id, reference_bounds, **sizes)
        coarse_all.extend(coarse)
        if options.mock_matcher:
            matches = mock_match(coarse, {spec.id: raster.values}, reference,
                                 {spec.id: footprint_mapping(footprint, size)},
                                 options.mock_grid, options.mock_patch, options.mock_search)
            matches = filter_matches(matches, options.confidence_threshold, options.max_per_tile)
            try:
                footprint = refine_footprint(footprint, matches, size, options.confidence_threshold,
                                             seed=derived_seed(config.run.seed, "refine", spec.id))
            except (InsufficientMatches, ResidualTooLarge) as e:
                logger.warning(f"Keeping the prior footprint of '{spec.id}': {e}")
        refined[spec.id] = footprint
        fine_all.extend(plan_tiles(footprint, size, "fine", spec.id, reference_bounds, **sizes))

    write_tile_manifest(ctx.produced(ctx.stage_dir / "tiles_coarse.json"), coarse_all)
    write_tile_manifest(ctx.produced(ctx.stage_dir / "tiles_fine.json"), fine_all)
    save_footprints(ctx.produced(ctx.stage_dir / "footprints.json"), refined)
    ctx.metadata.update({"coarse_tiles": len(coarse_all), "fine_tiles": len(fine_all)})


def stage_gcp_assemble(ctx: StageContext) -> None:
    config = ctx.config
    options = config.gcp
    tiles = read_tile_manifest(ctx.use(ctx.stage_dir / "tiles_fine.json"))
    if config.paths.matches:
        matches = read_matches(ctx.use(config.paths.matches))
    elif options.mock_matcher:
        reference = read_raster(ctx.use(_required(config.paths.reference_image, "paths.reference_image")))
        images, mappings = _mock_inputs(ctx, _footprints(ctx))
        matches = mock_match(tiles, images, reference, mappings,
                             options.mock_grid, options.mock_patch, options.mock_search)
    else:
        raise MissingInput("gcp-assemble needs paths.matches or gcp.mock_matcher = true")
    write_matches(ctx.produced(ctx.stage_dir / "matches.csv"), matches)

    filtered = filter_matches(matches, options.confidence_threshold, options.max_per_tile)
    gcps, skipped = assemble_gcps(filtered, _reference_dem(ctx), options.check_fraction,
                                  config.run.seed, options.sigma_px)
    if not gcps:
        raise InsufficientMatches(f"No usable GCPs out of {len(matches)} matches")
    write_observations(ctx.produced(ctx.stage_dir / "gcps.csv"), gcps)
    ctx.metadata.update({"matches": len(matches), "kept": len(filtered), "gcps": len(gcps), "skipped_nodata": skipped})


def _observation_file(ctx: StageContext, records: Mapping[str, FilmRecord],
                      corrected: bool) -> Tuple[List[GcpRecord], List[TiePoint]]:
    """
    GCPs and ties from paths.observations, measured on the uncorrected final
    images; with corrected=True they are moved onto the bending-corrected images.
    """
    if not ctx.config.paths.observations:
        return [], []
    gcps, ties = read_observations(ctx.use(ctx.config.paths.observations))
    used = [g.image_id for g in gcps] + [img for t in ties for img, _ in t.observations]
    validate_image_ids([spec.id for spec in ctx.config.images], used, ctx.config.paths.observations)

    def moved(image_id: str, pixel: PixelPoint) -> PixelPoint:
        record = records.get(image_id)
        if record is None:
            raise DataError(f"Observation refers to unknown image '{image_id}'")
        if not corrected or record.correction is None:
            return pixel
        col, row = record.correct_points([[pixel.col, pixel.row]])[0]
        return PixelPoint(float(col), float(row))

    gcps = [replace(g, pixel=moved(g.image_id, g.pixel)) for g in gcps]
    ties = [
        TiePoint(t.tie_id, [(img, moved(img, px)) for img, px in t.observations], t.ground, t.sigma_px)
        for t in ties
    ]
    return gcps, ties


def _initial_cameras(ctx: StageContext, records: Mapping[str, FilmRecord]) -> List[PanoramicCamera]:
    config = ctx.config
    footprints = _footprints(ctx)
    pitch_mm = config.camera.pitch_um / 1000.0
    cameras = []
    for spec in config.images:
        w, h = records[spec.id].final_size
        cameras.extend(initialize_cameras(
            [footprints[spec.id]], [spec.look], [spec.id],
            f_mm=config.camera.f_mm,
            film_half_length_mm=w * pitch_mm / 2.0,
            film_half_width_mm=h * pitch_mm / 2.0,
        ))
    return cameras


def _bending_ab(ctx: StageContext, records: Mapping[str, FilmRecord]) -> List[Dict[str, Any]]:
    config = ctx.config
    rows = []
    for variant, corrected in (("with correction", True), ("without correction", False)):
        gcps, ties = _observation_file(ctx, records, corrected)
        if not gcps:
            raise MissingInput("The bending A/B comparison needs GCPs in paths.observations")
        _, _, report = bundle_adjust(_initial_cameras(ctx, records), gcps, ties, config.adjust,
                                     config.camera.pitch_um, config.run.utm_zone, ctx.jobs)
        rmse = report.rmse_xyz_checkpoints or (float("nan"),) * 3
        rows.append({"variant": variant, "sigma0_px": report.sigma0,
                     "rmse_x_m": rmse[0], "rmse_y_m": rmse[1], "rmse_z_m": rmse[2]})
        logger.info(f"Bending A/B '{variant}': sigma0 {report.sigma0:.3f} px")
    return rows


def stage_adjust(ctx: StageContext) -> None:
    config = ctx.config
    records = _records(ctx)
    gcps, ties = _observation_file(ctx, records, config.filmprep.bending_correction)
    sources = ["observations"] if gcps else []
    generated = ctx.path("gcp", "gcps.csv")
    if generated.exists():
        extra, _ = read_observations(ctx.use(generated))
        gcps = gcps + extra
        sources.append("gcpgen")
    if not gcps:
        raise MissingInput("adjust needs GCPs: run gcp-assemble or set paths.observations")

    cameras, _, report = bundle_adjust(_initial_cameras(ctx, records), gcps, ties, config.adjust,
                                       config.camera.pitch_um, config.run.utm_zone, ctx.jobs)
    payload = report.to_dict()
    payload["bending_corrected"] = {k: r.bending_corrected for k, r in records.items()}
    payload["gcp_sources"] = sources
    write_json(payload, ctx.produced(ctx.stage_dir / "report.json"))

    for camera in cameras:
        save_camera(camera, ctx.produced(ctx.stage_dir / "cameras" / f"{camera.image_id}.json"), config.camera.pitch_um)
        w, h = records[camera.image_id].final_size
        dx, dy = residual_field(report, camera.image_id, w, h,
                                config.adjust.residual_grid_step, config.adjust.residual_cutoff)
        ctx.produced(write_raster(dx, ctx.stage_dir / f"residual_dx_{camera.image_id}.bin"))
        ctx.produced(write_raster(dy, ctx.stage_dir / f"residual_dy_{camera.image_id}.bin"))

    if config.filmprep.bending_ab:
        write_csv(_bending_ab(ctx, records), BENDING_AB_FIELDS, ctx.produced(ctx.stage_dir / "bending_ab.csv"))
    ctx.metadata.update({"sigma0_px": report.sigma0, "converged": report.converged, "gcps": len(gcps),
                         "ties": len(ties)})


def _height_range(ctx: StageContext) -> Tuple[float, float]:
    stereo = ctx.config.stereo
    if stereo.height_min is not None and stereo.height_max is not None:
        return stereo.height_min, stereo.height_max
    if ctx.config.paths.reference_dem:
        values = _reference_dem(ctx).values
        values = values[np.isfinite(values)]
        if values.size:
            return float(values.min()), float(values.max())
    raise ConfigError("Set stereo.height_min/height_max or paths.reference_dem for rectification")


def stage_rectify(ctx: StageContext) -> None:
    config = ctx.config
    stereo = config.stereo
    spec_a, spec_b = _pair(config)
    cam_a, cam_b = _cameras(ctx, [spec_a.id, spec_b.id])
    model = build_rectification(cam_a, cam_b, _height_range(ctx), config.camera.pitch_um,
                                stereo.degree, stereo.grid_size, stereo.height_levels, stereo.condition_limit)
    save_rectification(model, ctx.produced(ctx.stage_dir / "model.json"))

    image_a, _ = _film(ctx, spec_a.id)
    image_b, _ = _film(ctx, spec_b.id)
    rect_a = resample_rectified(image_a, model, "a", ctx.jobs)
    rect_b = resample_rectified(image_b, model, "b", ctx.jobs)
    ctx.produced(write_raster(rect_a, ctx.stage_dir / "rect_a.bin"))
    ctx.produced(write_raster(rect_b, ctx.stage_dir / "rect_b.bin"))

    low, high = model.disparity_range()
    yparallax = measure_y_parallax(rect_a, rect_b, stereo.yparallax_step, stereo.yparallax_patch,
                                   stereo.yparallax_search, disparity=0.5 * (low + high),
                                   search_cols=int(math.ceil(0.5 * (high - low))) + stereo.yparallax_search)
    ctx.produced(write_raster(yparallax, ctx.stage_dir / "yparallax.bin"))
    valid = yparallax.values[np.isfinite(yparallax.values)]
    ctx.metadata.update({
        "fit_rms_px": model.fit_rms_px,
        "heldout_rms_px": model.heldout_rms_px,
        "disparity_range": [low, high],
        "yparallax_mean_px": float(valid.mean()) if valid.size else None,
        "yparallax_sd_px": float(valid.std()) if valid.size else None,
    })


def stage_match(ctx: StageContext) -> None:
    stereo = ctx.config.stereo
    model = load_rectification(ctx.use(ctx.path("rectify", "model.json")))
    rect_a = read_raster(ctx.use(ctx.path("rectify", "rect_a.bin")))
    rect_b = read_raster(ctx.use(ctx.path("rectify", "rect_b.bin")))
    d_min, d_max = model.disparity_range(stereo.disparity_margin)
    disparity = sgm_match(rect_a, rect_b, d_min, d_max, stereo.p1, stereo.p2, stereo.census_window,
                          stereo.paths, stereo.lr_tolerance, stereo.tile_size, ctx.jobs)
    path = ctx.produced(ctx.stage_dir / "disparity.bin")
    disparity.save(path)
    ctx.metadata.update({"d_min": d_min, "d_max": d_max, "valid_fraction": disparity.valid_fraction})


def stage_dem(ctx: StageContext) -> None:
    config = ctx.config
    spec_a, spec_b = _pair(config)
    cam_a, cam_b = _cameras(ctx, [spec_a.id, spec_b.id])
    model = load_rectification(ctx.use(ctx.path("rectify", "model.json")))
    disparity = DisparityMap(read_raster(ctx.use(ctx.path("match", "disparity.bin"))),
                             *model.disparity_range(config.stereo.disparity_margin))
    xy_a, xy_b = disparity_to_points(disparity, config.surface.point_stride)
    if len(xy_a) == 0:
        raise InsufficientMatches("The disparity map has no valid cells")

    pitch = config.camera.pitch_um
    cols_a, rows_a = model.a.inverse(xy_a[:, 0], xy_a[:, 1])
    cols_b, rows_b = model.b.inverse(xy_b[:, 0], xy_b[:, 1])
    mm_a = pixel_to_mm(cols_a, rows_a, pitch, *model.a.size)
    mm_b = pixel_to_mm(cols_b, rows_b, pitch, *model.b.size)
    finite = np.all(np.isfinite(mm_a), axis=1) & np.all(np.isfinite(mm_b), axis=1)
    points, miss, ok = triangulate_points(cam_a, cam_b, mm_a[finite], mm_b[finite])
    keep = ok & filter_points(points, miss, cam_a, pitch, config.surface.quality_factor)
    if not keep.any():
        raise InsufficientMatches("No triangulated point passed the quality filter")

    zone, north = _utm(config, cam_a)
    like = None
    if config.paths.reference_dem:
        reference = _reference_dem(ctx)
        if math.isclose(abs(reference.geotransform[1]), config.surface.cell_size) and reference.geotransform[2] == 0.0:
            like = reference
    dem = grid_dem(points[keep], zone, north, config.surface.cell_size, like)
    ctx.produced(write_raster(dem, ctx.stage_dir / "dem.bin"))
    if config.surface.write_points:
        enh = ecef_to_utm(points[keep], zone, north)
        rows = [{"easting": f"{e:.3f}", "northing": f"{n:.3f}", "h": f"{h:.3f}", "miss_m": f"{m:.3f}"}
                for (e, n, h), m in zip(enh, miss[keep])]
        write_csv(rows, ["easting", "northing", "h", "miss_m"], ctx.produced(ctx.stage_dir / "points.csv"))
    ctx.metadata.update({
        "points": int(keep.sum()),
        "rejected": int(len(keep) - keep.sum()),
        "median_miss_m": float(np.median(miss[keep])),
        "filled_fraction": float(np.isfinite(dem.values).mean()),
    })


def stage_coregister(ctx: StageContext) -> None:
    config = ctx.config
    surface = config.surface
    dem = read_raster(ctx.use(ctx.path("dem", "dem.bin")))
    reference = on_grid(_reference_dem(ctx), dem, "reference DEM")
    stable = None
    mask_name = "all valid cells"
    if config.paths.stable_mask:
        stable = read_mask(ctx.use(config.paths.stable_mask), dem)
        mask_name = Path(config.paths.stable_mask).name

    before = dh_stats(dem, reference, stable, mask_name)
    corrected, after, _ = coregister_tiles(
        dem, reference, stable, surface.tile_size_m, surface.tile_overlap, surface.lsm_iterations,
        surface.lsm_tolerance, surface.dh_limit, surface.slope_limit, surface.min_stable_fraction,
        ctx.jobs, mask_name,
    )
    if surface.fill_gaps:
        corrected = fill_gaps_hypsometric(corrected, reference, band_width=surface.band_width)
    ctx.produced(write_raster(corrected, ctx.stage_dir / "dem_coreg.bin"))
    ctx.produced(write_raster(elevation_difference(dem, reference), ctx.stage_dir / "dh_before.bin"))
    ctx.produced(write_raster(elevation_difference(corrected, reference), ctx.stage_dir / "dh_after.bin"))

    payload: Dict[str, Any] = {"before": before.to_dict(), "after": after.to_dict()}
    if config.paths.truth_dem:
        truth = on_grid(read_raster(ctx.use(config.paths.truth_dem)), dem, "truth DEM")
        payload["truth_before"] = dh_stats(dem, truth).to_dict()
        payload["truth_after"] = dh_stats(corrected, truth).to_dict()
    write_json(payload, ctx.produced(ctx.stage_dir / "dh_report.json"))
    ctx.metadata.update({"nmad_before_m": before.nmad, "nmad_after_m": after.nmad,
                         "flagged_tiles": after.flagged_tiles})


def stage_report(ctx: StageContext) -> None:
    from .report import build_report

    for path in build_report(ctx.config, ctx.use).values():
        ctx.produced(path)


STAGE_FUNCTIONS: Dict[str, Callable[[StageContext], None]] = {
    "synth": stage_synth,
    "filmprep": stage_filmprep,
    "gcp-plan": stage_gcp_plan,
    "gcp-assemble": stage_gcp_assemble,
    "adjust": stage_adjust,
    "rectify": stage_rectify,
    "match": stage_match,
    "dem": stage_dem,
    "coregister": stage_coregister,
    "report": stage_report,
}


# ---------------------------------------------------------------------------
# Runner
# ---------------------------------------------------------------------------

def write_provenance(ctx: StageContext, started: float, finished: float) -> Path:
    from . import __version__

    def relative(path: str) -> str:
        try:
            return str(Path(path).resolve().relative_to(ctx.run_dir.resolve()))
        except ValueError:
            return path

    record = {
        "stage": ctx.name,
        "version": __version__,
        "config": ctx.config.source,
        "inputs": {relative(k): v for k, v in sorted(ctx.inputs.items())},
        "outputs": sorted(relative(p) for p in ctx.outputs),
        "parameters": config_to_dict(ctx.config),
        "jobs": ctx.jobs,
        "timings": {"started": started, "finished": finished, "seconds": round(finished - started, 3)},
        "metadata": ctx.metadata,
    }
    path = ctx.path("provenance", f"{ctx.name}.json")
    write_json(record, path)
    return path


def run_stage(name: str, config: PipelineConfig, jobs: int = 1) -> StageContext:
    """
    Execute one stage and write its provenance record.

    Raises:
        ConfigError: For an unknown stage name
        CospError: Whatever the stage raises
    """
    if name not in STAGE_FUNCTIONS:
        raise ConfigError(f"Unknown stage '{name}'; expected one of {', '.join(STAGES)}")
    ctx = StageContext(name, config, jobs)
    ctx.stage_dir.mkdir(parents=True, exist_ok=True)
    logger.info(f"Stage '{name}' starting (run dir '{config.run_dir}', {jobs} job(s))")
    started = time.time()
    STAGE_FUNCTIONS[name](ctx)
    finished = time.time()
    write_provenance(ctx, started, finished)
    logger.info(f"Stage '{name}' finished in {finished - started:.1f} s ({len(ctx.outputs)} outputs)")
    return ctx


def run_order(config: PipelineConfig) -> List[str]:
    """All stages in order; the synth stage only for synthetic runs."""
    return [s for s in STAGES if s != "synth" or config.run.synthetic]


def run_all(config: PipelineConfig, jobs: int = 1) -> List[StageContext]:
    return [run_stage(name, config, jobs) for name in run_order(config)]
