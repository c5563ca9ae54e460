"""
Bundle adjustment of panoramic stereo pairs.

Levenberg-Marquardt over the 13 parameters of every camera and the ECEF
coordinates of all tie points. Tie points are eliminated from the normal
equations by a Schur complement, so the solved system only ever has
13 x (number of cameras) unknowns. Positions and tie coordinates are scaled to
kilometers and the reduced matrix is Jacobi-preconditioned before the solve.
"""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.spatial import cKDTree

from .camera import (
    PARAMETER_NAMES,
    N_PARAMETERS,
    PanoramicCamera,
    backproject_rays,
    film_dimensions_px,
    intersect_ellipsoid_height,
    intersect_rays,
    mm_to_pixel,
    pixel_to_mm,
    plausibility_report,
    project_jacobian,
    solve_projection,
)
from .config import AdjustOptions
from .errors import DataError, DivergingResiduals, NoConvergence, SingularNormalMatrix
from .geodesy import ecef_to_geodetic_array, ecef_to_utm, enu_rotation, geodetic_to_ecef_array, utm_zone_for
from .models import AdjustmentReport, EcefPoint, FootprintEstimate, GcpRecord, TiePoint
from .raster import RasterGrid
from .utils import parallel_map

logger = logging.getLogger(__name__)

INITIAL_ALTITUDE_M = 170000.0
INITIAL_OMEGA = {"fore": math.radians(-15.0), "aft": math.radians(15.0)}

# scaled units: km for positions and position rates, radians otherwise
PARAMETER_SCALE = np.array([1000.0] * 6 + [1.0] * 7)
TIE_SCALE = 1000.0

INITIAL_DAMPING = 1e-3
MIN_DAMPING = 1e-12
MAX_DAMPING = 1e12
SINGULARITY_THRESHOLD = 1e-15
TINY_SSE = 1e-24
# residual scatter below this is projection round-off, not measurement error
MIN_SIGMA0_PX = 1e-4

PitchLike = Union[float, Dict[str, float]]


def initialize_cameras(footprints: Sequence[FootprintEstimate],
                       looks: Sequence[str],
                       image_ids: Optional[Sequence[str]] = None,
                       altitude_m: float = INITIAL_ALTITUDE_M,
                       **interior) -> List[PanoramicCamera]:
    """
    Approximate cameras from footprint estimates.

    Each camera gets omega0 = -15 deg (fore) or +15 deg (aft), kappa0 = 0, all
    rates and imc zero, and sits 170 km above the footprint center, shifted along the
    local north axis so that the mid-scan boresight meets the footprint center.
    Flight direction is taken as local north.

    Args:
        footprints: One FootprintEstimate per image
        looks: "fore" or "aft" per image
        image_ids: Optional ids, default image0, image1, ...
        altitude_m: Height of the initial position above the footprint center
        **interior: f_mm / film extents passed to PanoramicCamera
    """
    if len(footprints) != len(looks):
        raise ValueError("initialize_cameras needs one look direction per footprint")
    cameras = []
    for i, (footprint, look) in enumerate(zip(footprints, looks)):
        if look not in INITIAL_OMEGA:
            raise ValueError(f"Look direction must be 'fore' or 'aft', got '{look}'")
        center = footprint.center()
        omega0 = INITIAL_OMEGA[look]
        up_to_ecef = enu_rotation(center.lon, center.lat).T
        ground = geodetic_to_ecef_array(center.lon, center.lat, center.h)
        offset = np.array([0.0, altitude_m * math.tan(omega0), altitude_m])
        position = ground + up_to_ecef @ offset
        image_id = image_ids[i] if image_ids else f"image{i}"
        cameras.append(PanoramicCamera(
            X0=float(position[0]), Y0=float(position[1]), Z0=float(position[2]),
            omega0=omega0,
            frame_lon=center.lon,
            frame_lat=center.lat,
            image_id=image_id,
            metadata={"look": look},
            **interior,
        ))
        logger.info(f"Initialized camera '{image_id}' ({look}) over ({center.lon:.4f}, {center.lat:.4f})")
    return cameras


# ---------------------------------------------------------------------------
# Problem assembly
# ---------------------------------------------------------------------------

@dataclass
class _Problem:
    cameras: List[PanoramicCamera]
    pitch_um: np.ndarray            # per camera
    dims: List[Tuple[int, int]]     # per camera (w, h)
    cam_index: np.ndarray           # (n,) camera of each observation
    pixels: np.ndarray              # (n, 2)
    sigma: np.ndarray               # (n,)
    ground: np.ndarray              # (n, 3) for GCPs, NaN for ties
    tie_index: np.ndarray           # (n,) -1 for GCPs
    roles: List[str]
    ids: List[str]
    free: np.ndarray                # free parameter indices
    ties: List[TiePoint]

    @property
    def active(self) -> np.ndarray:
        return np.array([r != "check" for r in self.roles], dtype=bool)


def _pitch_for(pitch_um: PitchLike, image_id: str) -> float:
    if isinstance(pitch_um, dict):
        if image_id not in pitch_um:
            raise DataError(f"No scan pitch given for image '{image_id}'")
        return float(pitch_um[image_id])
    return float(pitch_um)


def _build_problem(cameras: Sequence[PanoramicCamera], gcps: Sequence[GcpRecord],
                   tiepoints: Sequence[TiePoint], pitch_um: PitchLike,
                   options: AdjustOptions) -> _Problem:
    ids = [c.image_id for c in cameras]
    if len(set(ids)) != len(ids):
        raise DataError(f"Camera image ids must be unique, got {ids}")
    index = {image_id: i for i, image_id in enumerate(ids)}
    pitch = np.array([_pitch_for(pitch_um, c.image_id) for c in cameras])
    dims = [film_dimensions_px(c, p) for c, p in zip(cameras, pitch)]

    cam_index, pixels, sigma, ground, tie_index, roles, obs_ids = [], [], [], [], [], [], []
    for g in gcps:
        if g.image_id not in index:
            raise DataError(f"GCP {g.gcp_id or '?'} refers to unknown image '{g.image_id}'")
        cam_index.append(index[g.image_id])
        pixels.append((g.pixel.col, g.pixel.row))
        sigma.append(g.sigma_px)
        ground.append(g.ground.as_array())
        tie_index.append(-1)
        roles.append(g.role)
        obs_ids.append(g.gcp_id)

    for k, tp in enumerate(tiepoints):
        images = {img for img, _ in tp.observations}
        if not options.joint and len(images) > 2:
            raise DataError(f"Tie point {tp.tie_id} spans {len(images)} images; enable adjust.joint")
        for img, px in tp.observations:
            if img not in index:
                raise DataError(f"Tie point {tp.tie_id} refers to unknown image '{img}'")
            cam_index.append(index[img])
            pixels.append((px.col, px.row))
            sigma.append(tp.sigma_px)
            ground.append((np.nan, np.nan, np.nan))
            tie_index.append(k)
            roles.append("tie")
            obs_ids.append(tp.tie_id)

    fixed = set(options.fixed_parameters)
    free = np.array([i for i, name in enumerate(PARAMETER_NAMES) if name not in fixed], dtype=int)
    return _Problem(
        cameras=list(cameras),
        pitch_um=pitch,
        dims=dims,
        cam_index=np.array(cam_index, dtype=int),
        pixels=np.array(pixels, dtype=float).reshape(-1, 2),
        sigma=np.array(sigma, dtype=float),
        ground=np.array(ground, dtype=float).reshape(-1, 3),
        tie_index=np.array(tie_index, dtype=int),
        roles=roles,
        ids=obs_ids,
        free=free,
        ties=list(tiepoints),
    )


def _check_control(problem: _Problem, options: AdjustOptions) -> None:
    for ci, cam in enumerate(problem.cameras):
        n_control = int(np.sum((problem.cam_index == ci) & np.array([r == "control" for r in problem.roles])))
        if n_control < options.min_control_per_camera:
            names = [f"{cam.image_id}:{PARAMETER_NAMES[i]}" for i in problem.free]
            raise SingularNormalMatrix(
                f"Camera '{cam.image_id}' has {n_control} control GCPs; at least "
                f"{options.min_control_per_camera} are required",
                names,
            )


def triangulate_ties(cameras: Sequence[PanoramicCamera], tiepoints: Sequence[TiePoint],
                     pitch_um: PitchLike) -> np.ndarray:
    """Closest-point intersection of every tie point's rays; returns (n_ties, 3) ECEF."""
    by_id = {c.image_id: c for c in cameras}
    out = np.zeros((len(tiepoints), 3))
    for k, tp in enumerate(tiepoints):
        origins, directions = [], []
        for img, px in tp.observations:
            cam = by_id[img]
            pitch = _pitch_for(pitch_um, img)
            w, h = film_dimensions_px(cam, pitch)
            o, d = backproject_rays(cam, pixel_to_mm(px.col, px.row, pitch, w, h))
            origins.append(o[0])
            directions.append(d[0])
        out[k], _ = intersect_rays(np.array(origins), np.array(directions))
    return out


# ---------------------------------------------------------------------------
# Linearization
# ---------------------------------------------------------------------------

def _evaluate(problem: _Problem, cameras: Sequence[PanoramicCamera], tie_xyz: np.ndarray,
              jacobian: bool, jobs: int = 1):
    """Residuals (observed - predicted, px) and optionally Jacobians in px per SI unit."""
    n = problem.pixels.shape[0]
    residuals = np.full((n, 2), np.nan)
    ok = np.zeros(n, dtype=bool)
    j_cam = np.zeros((n, 2, N_PARAMETERS)) if jacobian else None
    j_ground = np.zeros((n, 2, 3)) if jacobian else None

    ground = problem.ground.copy()
    is_tie = problem.tie_index >= 0
    if np.any(is_tie):
        ground[is_tie] = tie_xyz[problem.tie_index[is_tie]]

    def work(ci: int):
        idx = np.flatnonzero(problem.cam_index == ci)
        if idx.size == 0:
            return idx, None
        cam = cameras[ci]
        if jacobian:
            xy, jc, jg, okc = project_jacobian(cam, ground[idx])
        else:
            state = solve_projection(cam, ground[idx])
            xy, okc, jc, jg = state.xy, state.ok, None, None
        w, h = problem.dims[ci]
        cols, rows, _ = mm_to_pixel(xy, problem.pitch_um[ci], w, h)
        return idx, (cols, rows, okc, jc, jg, problem.pitch_um[ci] / 1000.0)

    for idx, result in parallel_map(work, range(len(cameras)), jobs):
        if result is None:
            continue
        cols, rows, okc, jc, jg, pitch = result
        residuals[idx, 0] = problem.pixels[idx, 0] - cols
        residuals[idx, 1] = problem.pixels[idx, 1] - rows
        ok[idx] = okc
        if jacobian:
            j_cam[idx, 0] = jc[:, 0] / pitch
            j_cam[idx, 1] = -jc[:, 1] / pitch
            j_ground[idx, 0] = jg[:, 0] / pitch
            j_ground[idx, 1] = -jg[:, 1] / pitch
    return residuals, ok, j_cam, j_ground


def _weighted_sse(residuals: np.ndarray, weights: np.ndarray) -> float:
    used = weights > 0
    if not np.all(np.isfinite(residuals[used])):
        return math.inf
    return float(np.sum(weights[used] * np.sum(residuals[used] ** 2, axis=1)))


@dataclass
class _Normal:
    u: np.ndarray       # (m, m) camera block
    g_c: np.ndarray     # (m,)
    v: np.ndarray       # (k, 3, 3)
    g_t: np.ndarray     # (k, 3)
    w: np.ndarray       # (k, m, 3)


def _normal_equations(problem: _Problem, residuals, j_cam, j_ground, weights) -> _Normal:
    nf = problem.free.size
    n_cams = len(problem.cameras)
    n_ties = len(problem.ties)
    m = n_cams * nf
    jc = j_cam[:, :, problem.free] * PARAMETER_SCALE[problem.free]
    jg = j_ground * TIE_SCALE
    wr = weights[:, None] * residuals
    u = np.zeros((m, m))
    g_c = np.zeros(m)
    v = np.zeros((n_ties, 3, 3))
    g_t = np.zeros((n_ties, 3))
    w = np.zeros((n_ties, m, 3))
    used = weights > 0
    for ci in range(n_cams):
        idx = np.flatnonzero((problem.cam_index == ci) & used)
        if idx.size == 0:
            continue
        block = slice(ci * nf, (ci + 1) * nf)
        jci = jc[idx]
        u[block, block] = np.einsum("n,nai,naj->ij", weights[idx], jci, jci)
        g_c[block] = np.einsum("nai,na->i", jci, wr[idx])
        tie_obs = idx[problem.tie_index[idx] >= 0]
        if tie_obs.size:
            k = problem.tie_index[tie_obs]
            contrib = np.einsum("n,nai,naj->nij", weights[tie_obs], jc[tie_obs], jg[tie_obs])
            np.add.at(w[:, block, :], k, contrib)
    tie_obs = np.flatnonzero((problem.tie_index >= 0) & used)
    if tie_obs.size:
        k = problem.tie_index[tie_obs]
        np.add.at(v, k, np.einsum("n,nai,naj->nij", weights[tie_obs], jg[tie_obs], jg[tie_obs]))
        np.add.at(g_t, k, np.einsum("nai,na->ni", jg[tie_obs], wr[tie_obs]))
    # fully rejected ties have zero gradient and coupling; an identity block keeps their step zero
    v[~_active_ties(problem, weights)] = np.eye(3)
    return _Normal(u, g_c, v, g_t, w)


def _active_ties(problem: _Problem, weights: np.ndarray) -> np.ndarray:
    """Ties with at least one weighted observation."""
    is_tie = (problem.tie_index >= 0) & (weights > 0)
    counts = np.bincount(problem.tie_index[is_tie], minlength=len(problem.ties))
    return counts > 0


def _reject_whole_ties(problem: _Problem, rejected: np.ndarray) -> np.ndarray:
    """Extend rejection to every observation of a tie that lost one."""
    hit = np.unique(problem.tie_index[rejected & (problem.tie_index >= 0)])
    return rejected | (np.isin(problem.tie_index, hit) & (problem.tie_index >= 0))


def _parameter_labels(problem: _Problem) -> List[str]:
    return [f"{cam.image_id}:{PARAMETER_NAMES[i]}" for cam in problem.cameras for i in problem.free]


def _reduced_system(normal: _Normal, damping: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    u = normal.u + damping * np.diag(np.diag(normal.u))
    if normal.v.shape[0]:
        v = normal.v + damping * normal.v * np.eye(3)[None, :, :]
        v_inv = np.linalg.inv(v)
        a = u - np.einsum("kia,kab,kjb->ij", normal.w, v_inv, normal.w)
        b = normal.g_c - np.einsum("kia,kab,kb->i", normal.w, v_inv, normal.g_t)
    else:
        v_inv = normal.v
        a, b = u, normal.g_c
    return a, b, v_inv


def _check_rank(problem: _Problem, normal: _Normal) -> None:
    labels = _parameter_labels(problem)
    if normal.v.shape[0]:
        dets = np.linalg.det(normal.v)
        scale = np.einsum("kii->k", normal.v) ** 3
        bad = np.flatnonzero(~(dets > 1e-12 * np.maximum(scale, 1e-300)))
        if bad.size:
            raise SingularNormalMatrix(
                f"Tie point(s) {[problem.ties[k].tie_id for k in bad[:5]]} have degenerate ray geometry",
                [f"tie:{problem.ties[k].tie_id}" for k in bad],
            )
    a, _, _ = _reduced_system(normal, 0.0)
    diag = np.diag(a)
    zero = np.flatnonzero(~(diag > 0))
    if zero.size:
        raise SingularNormalMatrix(
            f"Parameters without observation support: {[labels[i] for i in zero]}",
            [labels[i] for i in zero],
        )
    d = 1.0 / np.sqrt(diag)
    eigvals, eigvecs = np.linalg.eigh(a * d[:, None] * d[None, :])
    if eigvals[0] < SINGULARITY_THRESHOLD * max(eigvals[-1], 1.0):
        vec = np.abs(eigvecs[:, 0])
        culprits = [labels[i] for i in np.flatnonzero(vec > 0.3 * vec.max())]
        raise SingularNormalMatrix(
            f"Normal matrix is rank deficient (min/max eigenvalue {eigvals[0]:.3e}/{eigvals[-1]:.3e}); "
            f"involved parameters: {', '.join(culprits)}",
            culprits,
        )


def _solve_step(problem: _Problem, normal: _Normal, damping: float) -> Tuple[np.ndarray, np.ndarray]:
    """Scaled camera step (n_cams, nf) and scaled tie step (k, 3)."""
    a, b, v_inv = _reduced_system(normal, damping)
    diag = np.diag(a)
    if np.any(~(diag > 0)):
        raise SingularNormalMatrix("Reduced normal matrix has a non-positive diagonal", _parameter_labels(problem))
    d = 1.0 / np.sqrt(diag)
    try:
        factor = linalg.cho_factor(a * d[:, None] * d[None, :])
        dc = linalg.cho_solve(factor, b * d) * d
    except linalg.LinAlgError as e:
        raise SingularNormalMatrix(f"Normal matrix is not positive definite: {e}", _parameter_labels(problem)) from e
    if normal.v.shape[0]:
        rhs = normal.g_t - np.einsum("kia,i->ka", normal.w, dc)
        dt = np.einsum("kab,kb->ka", v_inv, rhs)
    else:
        dt = np.zeros((0, 3))
    return dc.reshape(len(problem.cameras), problem.free.size), dt


def _apply_step(problem: _Problem, cameras, tie_xyz, dc, dt):
    updated = []
    for cam, step in zip(cameras, dc):
        params = cam.parameters()
        params[problem.free] += step * PARAMETER_SCALE[problem.free]
        updated.append(cam.with_parameters(params))
    return updated, tie_xyz + dt * TIE_SCALE


# ---------------------------------------------------------------------------
# Solver
# ---------------------------------------------------------------------------

def _levenberg_marquardt(problem: _Problem, cameras, tie_xyz, weights, options: AdjustOptions,
                         history: List[float], jobs: int):
    """Iterate to convergence with fixed weights. Returns cameras, ties, iterations, converged."""
    residuals, ok, j_cam, j_ground = _evaluate(problem, cameras, tie_xyz, True, jobs)
    if not np.all(ok[weights > 0]):
        raise DivergingResiduals(
            f"{int(np.sum(~ok[weights > 0]))} observation(s) cannot be projected with the current cameras"
        )
    sse = _weighted_sse(residuals, weights)
    history.append(sse)
    damping = INITIAL_DAMPING
    for iteration in range(1, options.max_iterations + 1):
        normal = _normal_equations(problem, residuals, j_cam, j_ground, weights)
        if iteration == 1:
            _check_rank(problem, normal)
        while True:
            dc, dt = _solve_step(problem, normal, damping)
            trial_cams, trial_ties = _apply_step(problem, cameras, tie_xyz, dc, dt)
            trial_res, trial_ok, _, _ = _evaluate(problem, trial_cams, trial_ties, False, jobs)
            trial_sse = _weighted_sse(trial_res, weights) if np.all(trial_ok[weights > 0]) else math.inf
            if trial_sse <= sse:
                damping = max(damping / 10.0, MIN_DAMPING)
                break
            damping *= 10.0
            if damping > MAX_DAMPING:
                logger.debug(f"Iteration {iteration}: no descent direction left, SSE {sse:.6e}")
                return cameras, tie_xyz, iteration, True

        step_norm = float(np.sqrt(np.sum(dc ** 2) + np.sum(dt ** 2)))
        relative = (sse - trial_sse) / sse if sse > 0 else 0.0
        cameras, tie_xyz = trial_cams, trial_ties
        logger.debug(f"Iteration {iteration}: SSE {sse:.6e} -> {trial_sse:.6e}, step {step_norm:.3e}, damping {damping:.1e}")
        sse = trial_sse
        history.append(sse)
        if relative < options.sse_tolerance or step_norm < options.step_tolerance or sse < TINY_SSE:
            return cameras, tie_xyz, iteration, True
        residuals, ok, j_cam, j_ground = _evaluate(problem, cameras, tie_xyz, True, jobs)
    return cameras, tie_xyz, options.max_iterations, False


def _redundancy(problem: _Problem, weights: np.ndarray) -> int:
    n_obs = int(np.sum(weights > 0))
    return 2 * n_obs - problem.free.size * len(problem.cameras) - 3 * int(_active_ties(problem, weights).sum())


def _sigma0(residuals: np.ndarray, weights: np.ndarray, redundancy: int) -> float:
    sse = _weighted_sse(residuals, weights)
    return math.sqrt(sse / redundancy) if redundancy > 0 else 0.0


def bundle_adjust(cameras: Sequence[PanoramicCamera],
                  gcps: Sequence[GcpRecord],
                  tiepoints: Sequence[TiePoint],
                  options: Optional[AdjustOptions] = None,
                  pitch_um: PitchLike = 7.0,
                  utm_zone: Optional[int] = None,
                  jobs: int = 1) -> Tuple[List[PanoramicCamera], List[TiePoint], AdjustmentReport]:
    """
    Estimate camera parameters and tie-point coordinates.

    Control GCPs and tie points enter the normal equations weighted by
    1/sigma_px^2; check GCPs are only projected for reporting. After
    convergence, observations whose residual RMS exceeds 3 sigma0 are
    down-weighted and the solve repeated; after three such rounds any still
    flagged are rejected, together with the other observations of their tie
    point.

    Args:
        cameras: Initial cameras (unique image ids)
        gcps: Control and check observations
        tiepoints: Tie points; missing ground coordinates are triangulated
        options: AdjustOptions (defaults if None)
        pitch_um: Scan pitch, scalar or per image id
        utm_zone: Zone for check-point RMSE (default: from the mean longitude)
        jobs: Worker threads for the linearization

    Returns:
        (adjusted cameras, adjusted tie points, AdjustmentReport)

    Raises:
        SingularNormalMatrix: Underdetermined or rank-deficient system
        NoConvergence: Max iterations reached
        DivergingResiduals: Observations cannot be projected
    """
    options = options or AdjustOptions()
    problem = _build_problem(cameras, gcps, tiepoints, pitch_um, options)
    _check_control(problem, options)

    if tiepoints:
        missing = [k for k, tp in enumerate(tiepoints) if tp.ground is None]
        tie_xyz = np.array([tp.ground.as_array() if tp.ground is not None else np.zeros(3) for tp in tiepoints])
        if missing:
            tie_xyz[missing] = triangulate_ties(cameras, [tiepoints[k] for k in missing], pitch_um)
    else:
        tie_xyz = np.zeros((0, 3))

    base_weights = np.where(problem.active, 1.0 / problem.sigma ** 2, 0.0)
    factors = np.ones_like(base_weights)
    redundancy = _redundancy(problem, base_weights)
    if redundancy <= 0:
        raise SingularNormalMatrix(
            f"Underdetermined adjustment: redundancy {redundancy}",
            _parameter_labels(problem),
        )
    logger.info(
        f"Adjusting {len(cameras)} camera(s): {int(np.sum(problem.tie_index < 0))} GCP observations, "
        f"{len(tiepoints)} tie points, redundancy {redundancy}"
    )

    cams = list(cameras)
    history: List[float] = []
    total_iterations = 0
    rejected = np.zeros(len(base_weights), dtype=bool)
    for round_index in range(options.reweight_rounds + 2):
        weights = base_weights * factors
        cams, tie_xyz, iterations, converged = _levenberg_marquardt(
            problem, cams, tie_xyz, weights, options, history, jobs
        )
        total_iterations += iterations
        if not converged:
            raise NoConvergence(f"Bundle adjustment did not converge in {options.max_iterations} iterations")
        residuals, _, _, _ = _evaluate(problem, cams, tie_xyz, False, jobs)
        redundancy = _redundancy(problem, weights)
        sigma0 = _sigma0(residuals, weights, redundancy)
        normalized = np.sqrt(np.mean(residuals ** 2, axis=1)) / problem.sigma
        flagged = problem.active & ~rejected & (normalized > options.outlier_sigma * max(sigma0, MIN_SIGMA0_PX))
        if not np.any(flagged) or round_index == options.reweight_rounds + 1:
            break
        if round_index < options.reweight_rounds:
            factors = np.where(flagged, (options.outlier_sigma * sigma0 / np.maximum(normalized, 1e-300)) ** 2, 1.0)
            factors[rejected] = 0.0
            logger.info(f"Reweighting round {round_index + 1}: {int(flagged.sum())} observation(s) above "
                        f"{options.outlier_sigma} sigma0 ({sigma0:.3f} px)")
        else:
            rejected = _reject_whole_ties(problem, rejected | flagged)
            factors[rejected] = 0.0
            logger.warning(f"Rejected {int(rejected.sum())} observation(s) after {options.reweight_rounds} rounds")

    weights = base_weights * factors
    residuals, ok, _, _ = _evaluate(problem, cams, tie_xyz, False, jobs)
    redundancy = _redundancy(problem, weights)
    if redundancy <= 0:
        raise SingularNormalMatrix(f"Underdetermined after rejection: redundancy {redundancy}",
                                   _parameter_labels(problem))
    sigma0 = _sigma0(residuals, weights, redundancy)
    logger.info(f"Adjustment converged after {total_iterations} iteration(s): sigma0 = {sigma0:.4f} px")

    zone = utm_zone or utm_zone_for(float(np.mean([c.frame_lon for c in cams])))
    rmse = _checkpoint_rmse(problem, cams, pitch_um, zone)

    adjusted_ties = [replace(tp, ground=EcefPoint.from_array(p)) for tp, p in zip(tiepoints, tie_xyz)]
    report = AdjustmentReport(
        sigma0=sigma0,
        rmse_xyz_checkpoints=rmse,
        residuals=residuals,
        observation_ids=problem.ids,
        observation_images=[cams[i].image_id for i in problem.cam_index],
        observation_pixels=problem.pixels,
        converged=True,
        iterations=total_iterations,
        redundancy=redundancy,
        observation_roles=problem.roles,
        rejected=int(rejected.sum()),
        sse_history=history,
        plausibility={c.image_id: plausibility_report(c) for c in cams},
    )
    return cams, adjusted_ties, report


def _checkpoint_rmse(problem: _Problem, cameras, pitch_um: PitchLike,
                     zone: int) -> Optional[Tuple[float, float, float]]:
    """
    RMSE of check-point ground coordinates in UTM.

    Check points seen in two or more images are intersected from their rays
    (X, Y and Z); single-image ones are intersected with the ellipsoid at
    their known height and contribute to X and Y only.
    """
    check = [i for i, r in enumerate(problem.roles) if r == "check"]
    if not check:
        return None
    groups: Dict[str, List[int]] = {}
    for i in check:
        key = problem.ids[i] or f"#{i}"
        groups.setdefault(key, []).append(i)

    truth, estimate, has_z = [], [], []
    for key, idx in sorted(groups.items()):
        origins, directions = [], []
        for i in idx:
            ci = problem.cam_index[i]
            w, h = problem.dims[ci]
            xy = pixel_to_mm(problem.pixels[i, 0], problem.pixels[i, 1], problem.pitch_um[ci], w, h)
            o, d = backproject_rays(cameras[ci], xy)
            origins.append(o[0])
            directions.append(d[0])
        known = problem.ground[idx[0]]
        if len({problem.cam_index[i] for i in idx}) >= 2:
            point, _ = intersect_rays(np.array(origins), np.array(directions))
            has_z.append(True)
        else:
            height = float(ecef_to_geodetic_array(known)[2])
            point = intersect_ellipsoid_height(np.array(origins[:1]), np.array(directions[:1]), height)[0]
            has_z.append(False)
        truth.append(known)
        estimate.append(point)

    estimate = np.array(estimate)
    valid = np.all(np.isfinite(estimate), axis=1)
    if not np.any(valid):
        return None
    diff = ecef_to_utm(estimate[valid], zone) - ecef_to_utm(np.array(truth)[valid], zone)
    z_mask = np.array(has_z)[valid]
    rmse_x = float(np.sqrt(np.mean(diff[:, 0] ** 2)))
    rmse_y = float(np.sqrt(np.mean(diff[:, 1] ** 2)))
    rmse_z = float(np.sqrt(np.mean(diff[z_mask, 2] ** 2))) if np.any(z_mask) else math.nan
    return rmse_x, rmse_y, rmse_z


# ---------------------------------------------------------------------------
# Residual field
# ---------------------------------------------------------------------------

def residual_field(report: AdjustmentReport, image_id: str, width: int, height: int,
                   step: float = 50.0, cutoff: float = 300.0, power: float = 2.0,
                   neighbors: int = 12) -> Tuple[RasterGrid, RasterGrid]:
    """
    Inverse-distance-weighted GCP residual vectors on a regular pixel grid.

    Cells farther than `cutoff` px from every GCP are nodata. The grids use
    image pixel coordinates as their map frame (x = col, y = row).

    Returns:
        (dx grid, dy grid) in pixels
    """
    pixels, residuals = report.residuals_for(image_id)
    finite = np.all(np.isfinite(residuals), axis=1)
    pixels, residuals = pixels[finite], residuals[finite]
    n_cols = max(1, int(math.ceil(width / step)))
    n_rows = max(1, int(math.ceil(height / step)))
    geotransform = (0.0, float(step), 0.0, 0.0, 0.0, float(step))
    dx = np.full((n_rows, n_cols), np.nan)
    dy = np.full((n_rows, n_cols), np.nan)
    if len(pixels) == 0:
        logger.warning(f"No GCP residuals for image '{image_id}'; residual field is empty")
        return RasterGrid(dx, geotransform), RasterGrid(dy, geotransform)

    rows, cols = np.mgrid[0:n_rows, 0:n_cols]
    centers = np.column_stack([(cols.ravel() + 0.5) * step, (rows.ravel() + 0.5) * step])
    tree = cKDTree(pixels)
    k = min(neighbors, len(pixels))
    dist, idx = tree.query(centers, k=k, distance_upper_bound=cutoff)
    dist = dist.reshape(len(centers), k)
    idx = idx.reshape(len(centers), k)
    found = np.isfinite(dist)
    safe_idx = np.where(found, idx, 0)
    with np.errstate(divide="ignore"):
        weights = np.where(found, 1.0 / np.maximum(dist, 1e-9) ** power, 0.0)
    total = weights.sum(axis=1)
    covered = total > 0
    for grid, comp in ((dx, 0), (dy, 1)):
        values = residuals[safe_idx, comp]
        field_values = np.full(len(centers), np.nan)
        field_values[covered] = (weights[covered] * values[covered]).sum(axis=1) / total[covered]
        grid[:, :] = field_values.reshape(n_rows, n_cols)
    logger.info(f"Residual field for '{image_id}': {int(covered.sum())}/{len(centers)} cells within {cutoff} px of a GCP")
    return RasterGrid(dx, geotransform), RasterGrid(dy, geotransform)
