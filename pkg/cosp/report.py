"""Run report: text summary, CSV tables and figures assembled from stage artifacts."""
import csv
import logging
import shutil
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .config import PipelineConfig  # noqa: E402
from .errors import IncompleteRun  # noqa: E402
from .output import read_json, write_csv  # noqa: E402
from .raster import RasterGrid, read_raster  # noqa: E402
from .surface import dh_stats  # noqa: E402

logger = logging.getLogger(__name__)

RMSE_FIELDS = ["source", "sigma0_px", "rmse_x_m", "rmse_y_m", "rmse_z_m", "redundancy", "converged"]
DH_FIELDS = ["comparison", "phase", "status", "nmad_m", "median_m", "nmad_filtered_m",
             "median_filtered_m", "valid_fraction", "count"]
FIGURE_DPI = 120

PathUse = Callable[[Path], Path]


def _identity(path: Path) -> Path:
    return Path(path)


def _optional(path: Path, use: PathUse) -> Optional[Path]:
    return use(path) if path.exists() else None


def _dh_row(comparison: str, phase: str, stats: Optional[Dict[str, Any]]) -> Dict[str, Any]:
    if stats is None:
        return {"comparison": comparison, "phase": phase, "status": "absent"}
    return {
        "comparison": comparison,
        "phase": phase,
        "status": "ok",
        "nmad_m": stats["nmad_m"],
        "median_m": stats["median_m"],
        "nmad_filtered_m": stats["nmad_filtered_m"],
        "median_filtered_m": stats["median_filtered_m"],
        "valid_fraction": stats["valid_fraction"],
        "count": stats["count"],
    }


def _dh_sections(config: PipelineConfig, use: PathUse) -> Dict[str, Optional[Dict[str, Any]]]:
    """dh statistics per (comparison, phase); 'after' entries stay None without coregistration."""
    run_dir = config.run_dir
    report_path = _optional(run_dir / "coregister" / "dh_report.json", use)
    if report_path is not None:
        data = read_json(report_path)
        return {
            "reference/before": data.get("before"),
            "reference/after": data.get("after"),
            "truth/before": data.get("truth_before"),
            "truth/after": data.get("truth_after"),
        }
    sections: Dict[str, Optional[Dict[str, Any]]] = {k: None for k in
                                                      ("reference/before", "reference/after", "truth/before", "truth/after")}
    dem_path = _optional(run_dir / "dem" / "dem.bin", use)
    if dem_path is None:
        return sections
    from .pipeline import on_grid

    dem = read_raster(dem_path)
    for comparison, source in (("reference", config.paths.reference_dem), ("truth", config.paths.truth_dem)):
        if source and Path(source).exists():
            other = on_grid(read_raster(use(Path(source))), dem, f"{comparison} DEM")
            sections[f"{comparison}/before"] = dh_stats(dem, other).to_dict()
    return sections


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def _raster_figure(grid: RasterGrid, title: str, label: str, path: Path, symmetric: bool = True) -> Path:
    values = grid.values
    finite = values[np.isfinite(values)]
    fig, ax = plt.subplots(figsize=(7, 5))
    vmax = float(np.percentile(np.abs(finite), 98)) if finite.size else 1.0
    vmax = vmax if vmax > 0 else 1.0
    kwargs = {"vmin": -vmax, "vmax": vmax, "cmap": "RdBu_r"} if symmetric else {"cmap": "viridis"}
    image = ax.imshow(np.ma.masked_invalid(values), interpolation="nearest", **kwargs)
    fig.colorbar(image, ax=ax, label=label)
    ax.set_title(title)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def _residual_figure(dx: RasterGrid, dy: RasterGrid, image_id: str, path: Path) -> Path:
    rows, cols = np.mgrid[0:dx.height, 0:dx.width]
    x, y = dx.pixel_to_map(cols + 0.5, rows + 0.5)
    fig, ax = plt.subplots(figsize=(8, 4))
    ok = np.isfinite(dx.values) & np.isfinite(dy.values)
    if ok.any():
        q = ax.quiver(x[ok], y[ok], dx.values[ok], -dy.values[ok], np.hypot(dx.values[ok], dy.values[ok]),
                      cmap="viridis", angles="xy")
        fig.colorbar(q, ax=ax, label="residual (px)")
    ax.invert_yaxis()
    ax.set_aspect("equal")
    ax.set_title(f"GCP residual field, {image_id}")
    ax.set_xlabel("column (px)")
    ax.set_ylabel("row (px)")
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


def _histogram_figure(before: RasterGrid, after: Optional[RasterGrid], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for grid, name in ((before, "before"), (after, "after")):
        if grid is None:
            continue
        values = grid.values[np.isfinite(grid.values)]
        if values.size:
            limit = float(np.percentile(np.abs(values), 99))
            ax.hist(values, bins=100, range=(-limit, limit) if limit > 0 else None, alpha=0.6, label=name)
    ax.set_xlabel("dh (m)")
    ax.set_ylabel("cells")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=FIGURE_DPI)
    plt.close(fig)
    return path


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _fmt(value: Any, digits: int = 3) -> str:
    if value is None:
        return "n/a"
    try:
        return f"{float(value):.{digits}f}"
    except (TypeError, ValueError):
        return str(value)


def _summary_lines(adjust: Dict[str, Any], rectify: Optional[Dict[str, Any]], yparallax: Optional[RasterGrid],
                   dh: Dict[str, Optional[Dict[str, Any]]], bending_rows: List[Dict[str, str]]) -> List[str]:
    rmse = adjust.get("rmse_xyz_checkpoints_m") or [None, None, None]
    lines = [
        f"sigma0: {_fmt(adjust.get('sigma0_px'))} px "
        f"({'converged' if adjust.get('converged') else 'NOT converged'}, {adjust.get('iterations')} iterations)",
        f"checkpoint RMSE x/y/z: {_fmt(rmse[0])} / {_fmt(rmse[1])} / {_fmt(rmse[2])} m",
        f"bending corrected: {adjust.get('bending_corrected', {})}",
    ]
    if rectify is not None:
        lines.append(
            f"rectification: fit RMS {_fmt(rectify.get('fit_rms_px'), 4)} px, "
            f"held-out RMS {_fmt(rectify.get('heldout_rms_px'), 4)} px"
        )
    if yparallax is not None:
        values = yparallax.values[np.isfinite(yparallax.values)]
        if values.size:
            lines.append(f"y-parallax: mean {values.mean():.3f} px, SD {values.std():.3f} px ({values.size} nodes)")
    for key, stats in dh.items():
        label = key.replace("/", " ")
        if stats is None:
            lines.append(f"dh {label}: absent")
        else:
            lines.append(f"dh {label}: NMAD {_fmt(stats['nmad_m'])} m, median {_fmt(stats['median_m'])} m")
    for row in bending_rows:
        lines.append(f"bending A/B {row['variant']}: sigma0 {row['sigma0_px']} px")
    return lines


def build_report(config: PipelineConfig, use: PathUse = _identity) -> Dict[str, Path]:
    """
    Assemble <run_dir>/report/ from the artifacts of earlier stages.

    Raises:
        IncompleteRun: If the adjustment has not run
    """
    run_dir = config.run_dir
    out_dir = run_dir / "report"
    figures = out_dir / "figures"
    figures.mkdir(parents=True, exist_ok=True)
    adjust_path = run_dir / "adjust" / "report.json"
    if not adjust_path.exists():
        raise IncompleteRun(f"No adjustment report at '{adjust_path}'; run the adjust stage first")
    adjust = read_json(use(adjust_path))
    written: Dict[str, Path] = {}

    rmse = adjust.get("rmse_xyz_checkpoints_m") or [None, None, None]
    write_csv([{
        "source": "adjustment",
        "sigma0_px": adjust.get("sigma0_px"),
        "rmse_x_m": rmse[0],
        "rmse_y_m": rmse[1],
        "rmse_z_m": rmse[2],
        "redundancy": adjust.get("redundancy"),
        "converged": adjust.get("converged"),
    }], RMSE_FIELDS, out_dir / "rmse.csv")
    written["rmse"] = out_dir / "rmse.csv"

    bending_rows: List[Dict[str, str]] = []
    bending_src = _optional(run_dir / "adjust" / "bending_ab.csv", use)
    if bending_src is not None:
        shutil.copyfile(bending_src, out_dir / "bending_ab.csv")
        written["bending_ab"] = out_dir / "bending_ab.csv"
        with open(bending_src, "r", newline="", encoding="utf-8") as f:
            bending_rows = list(csv.DictReader(f))

    for camera_file in sorted((run_dir / "adjust" / "cameras").glob("*.json")):
        image_id = camera_file.stem
        dx_path = _optional(run_dir / "adjust" / f"residual_dx_{image_id}.bin", use)
        dy_path = _optional(run_dir / "adjust" / f"residual_dy_{image_id}.bin", use)
        if dx_path is not None and dy_path is not None:
            written[f"residuals_{image_id}"] = _residual_figure(
                read_raster(dx_path), read_raster(dy_path), image_id, figures / f"residuals_{image_id}.png"
            )

    rectify = None
    rectify_model = _optional(run_dir / "rectify" / "model.json", use)
    if rectify_model is not None:
        rectify = read_json(rectify_model)
    yparallax = None
    yparallax_path = _optional(run_dir / "rectify" / "yparallax.bin", use)
    if yparallax_path is not None:
        yparallax = read_raster(yparallax_path)
        written["yparallax"] = _raster_figure(yparallax, "y-parallax", "row offset (px)", figures / "yparallax.png")

    dh = _dh_sections(config, use)
    rows = [_dh_row(*key.split("/"), stats) for key, stats in dh.items()]
    write_csv(rows, DH_FIELDS, out_dir / "dh_stats.csv")
    written["dh_stats"] = out_dir / "dh_stats.csv"

    before_path = _optional(run_dir / "coregister" / "dh_before.bin", use)
    after_path = _optional(run_dir / "coregister" / "dh_after.bin", use)
    before = read_raster(before_path) if before_path is not None else None
    after = read_raster(after_path) if after_path is not None else None
    if before is not None:
        written["dh_before"] = _raster_figure(before, "dh before coregistration", "dh (m)", figures / "dh_before.png")
        written["dh_histogram"] = _histogram_figure(before, after, figures / "dh_histogram.png")
    if after is not None:
        written["dh_after"] = _raster_figure(after, "dh after coregistration", "dh (m)", figures / "dh_after.png")

    lines = _summary_lines(adjust, rectify, yparallax, dh, bending_rows)
    summary = out_dir / "summary.txt"
    summary.write_text("\n".join(lines) + "\n", encoding="utf-8")
    written["summary"] = summary
    logger.info(f"Report written to '{out_dir}' ({len(written)} artifacts)")
    return written
