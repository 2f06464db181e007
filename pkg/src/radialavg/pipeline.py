"""End-to-end calibration: robust pairs, refinement, averaging, global refinement."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .averaging import AveragingConfig, AveragingError, MIN_COVERAGE, WeightedModelSet, average_divisional
from .geometry import CameraModel, CorrespondenceSet, DivisionModel
from .joint import (CameraState, GlobalConfig, GlobalProblem, GlobalRefinementError, PairState,
                    global_refine)
from .lm import LMSettings
from .metrics import focal_adjusted_re
from .sampson import sampson_residuals
from .twoview import RansacConfig, RegularizerConfig, TwoViewEstimate, lo_ransac_pair, refine_pair

log = logging.getLogger(__name__)

STAGES = ("init", "refined", "averaged", "global")
EPIPOLE_CENTER_TOL = 0.25


class CalibrationError(RuntimeError):
    """A camera could not be calibrated (data problem, not a numerical one)."""


@dataclass(frozen=True)
class PipelineConfig:
    degree: int = 4
    threshold_px: float = 2.0
    reg_per_inlier: float = 1e-3
    seed: int = 0
    jobs: int = 1
    optimize_centers: bool = False
    outer_rounds: int = 3
    ransac_iterations: int = 2000
    even_powers_only: bool = False
    global_lm: LMSettings = LMSettings(max_iterations=50, rel_tol=1e-12)


@dataclass(eq=False)
class PairResult:
    corr: CorrespondenceSet
    init: TwoViewEstimate
    refined: TwoViewEstimate
    degenerate: bool = False


@dataclass(eq=False)
class CameraResult:
    camera_id: str
    model: DivisionModel
    principal_point: np.ndarray
    frame_size: tuple[int, int]
    weights: list[float]
    n_pairs: int
    n_inliers: int
    low_confidence: bool = False
    notes: list[str] = field(default_factory=list)
    stage_models: dict = field(default_factory=dict)


@dataclass(eq=False)
class CalibrationResult:
    cameras: dict[str, CameraResult]
    pairs: list[PairResult]
    stage_costs: dict[str, float]
    cost_monotone: bool
    global_history: list[dict]


def _pair_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1)[0]) for s in ss.spawn(n)]


def _run_pair(args):
    corr, rcfg, degree, reg, even = args
    init = lo_ransac_pair(corr, rcfg)
    if init.rejected:
        return init, init
    refined = refine_pair(init, corr, degree=degree, reg=reg, even_powers_only=even)
    return init, refined


def epipoles_near_center(F, tol: float = EPIPOLE_CENTER_TOL) -> bool:
    """True when both epipoles lie within ``tol`` (normalized units) of the distortion center."""
    for e in F.epipoles():
        if abs(e[2]) <= 1e-12 * np.linalg.norm(e):
            return False
        if np.hypot(e[0], e[1]) / abs(e[2]) > tol:
            return False
    return True


def _stage_cost(pairs, models_of, F_of) -> float:
    """Summed squared Sampson error (px^2) over each pair's RANSAC inliers."""
    total = 0.0
    for k, pr in enumerate(pairs):
        p, q = pr.corr.normalized()
        m = pr.init.inlier_mask
        ma, mb = models_of(k)
        e = sampson_residuals(p[m], q[m], F_of(k), ma, mb) * pr.corr.mean_diag
        e = e[np.isfinite(e)]
        total += float(e @ e)
    return total


def calibrate(sets: list[CorrespondenceSet], cfg: PipelineConfig = PipelineConfig()) -> CalibrationResult:
    if not sets:
        raise CalibrationError("no image pairs")
    reg = RegularizerConfig(per_inlier=cfg.reg_per_inlier)
    seeds = _pair_seeds(cfg.seed, len(sets))
    tasks = [(c, RansacConfig(threshold_px=cfg.threshold_px, max_iterations=cfg.ransac_iterations, seed=s),
              cfg.degree, reg, cfg.even_powers_only) for c, s in zip(sets, seeds)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as ex:
            outs = list(ex.map(_run_pair, tasks))
    else:
        outs = [_run_pair(t) for t in tasks]

    all_pairs = [PairResult(c, i, r) for c, (i, r) in zip(sets, outs)]
    for pr in all_pairs:
        if pr.init.rejected:
            log.warning("pair %s-%s rejected (%d inliers)", pr.corr.image_id_a, pr.corr.image_id_b,
                        pr.init.n_inliers)
    pairs = [pr for pr in all_pairs if not pr.init.rejected]
    for pr in pairs:
        if not pr.refined.refined:
            log.warning("pair %s-%s: refinement failed, keeping the two-view estimate",
                        pr.corr.image_id_a, pr.corr.image_id_b)
        pr.degenerate = epipoles_near_center(pr.refined.F)

    cam_ids = sorted({c for s in sets for c in (s.camera_id_a, s.camera_id_b)})
    frames = {}
    for s in sets:
        frames.setdefault(s.camera_id_a, s.frame_a)
        frames.setdefault(s.camera_id_b, s.frame_b)

    # per-camera averaging
    cameras: dict[str, CameraResult] = {}
    for cid in cam_ids:
        models, weights, degen = [], [], []
        inits = []
        for pr in pairs:
            for side in ("a", "b"):
                if getattr(pr.corr, f"camera_id_{side}") != cid:
                    continue
                models.append(getattr(pr.refined, f"model_{side}"))
                inits.append(getattr(pr.init, f"model_{side}"))
                weights.append(getattr(pr.refined, f"coverage_{side}"))
                degen.append(pr.degenerate)
        if not models:
            raise CalibrationError(f"camera {cid}: no pair survived robust estimation")
        frame = frames[cid]
        try:
            wset = WeightedModelSet.normalized(models, weights, frame.max_radius(), floor=MIN_COVERAGE)
        except AveragingError as exc:
            raise CalibrationError(f"camera {cid}: {exc}") from exc
        avg = average_divisional(wset, AveragingConfig(out_degree=cfg.degree, even_powers_only=cfg.even_powers_only))
        w = np.asarray(weights)
        good_share = float(w[~np.asarray(degen)].sum() / w.sum()) if w.sum() > 0 else 0.0
        notes = []
        low = good_share < 0.5
        if low:
            notes.append("most pairs have epipoles at the distortion center (forward motion)")
        cameras[cid] = CameraResult(cid, avg, np.array(frame.principal_point, float), (frame.width, frame.height),
                                    list(weights), len(models), 0, low, notes,
                                    {"init": inits, "refined": models, "averaged": avg})

    problem = GlobalProblem(
        {cid: CameraState(cameras[cid].model, frames[cid]) for cid in cam_ids},
        [PairState(pr.corr.image_id_a, pr.corr.image_id_b, pr.corr.camera_id_a, pr.corr.camera_id_b,
                   pr.refined.F, pr.corr.points_a, pr.corr.points_b, pr.init.inlier_mask.copy())
         for pr in pairs])
    gcfg = GlobalConfig(n_outer=cfg.outer_rounds, threshold_px=cfg.threshold_px,
                        optimize_centers=cfg.optimize_centers, even_powers_only=cfg.even_powers_only,
                        lm=cfg.global_lm)
    coverage = {cid: float(np.mean(cameras[cid].weights)) for cid in cam_ids}
    try:
        refined = global_refine(problem, gcfg, coverage)
    except GlobalRefinementError as exc:
        raise CalibrationError(str(exc)) from exc

    for cid in cam_ids:
        cam = cameras[cid]
        st = refined.cameras[cid]
        cam.model = st.model
        cam.principal_point = np.array(st.frame.principal_point, float)
        cam.stage_models["global"] = st.model
        cam.n_inliers = sum(p.n_inliers for p in refined.pairs if cid in (p.camera_a, p.camera_b))
        R = st.frame.max_radius()
        if st.model.monotone_radius(R) < R:
            cam.low_confidence = True
            cam.notes.append("final model is not monotone on the frame")

    pcams = [(pr.corr.camera_id_a, pr.corr.camera_id_b) for pr in pairs]
    costs = {
        "init": _stage_cost(pairs, lambda k: (pairs[k].init.model_a, pairs[k].init.model_b),
                            lambda k: pairs[k].init.F),
        "refined": _stage_cost(pairs, lambda k: (pairs[k].refined.model_a, pairs[k].refined.model_b),
                               lambda k: pairs[k].refined.F),
        "averaged": _stage_cost(pairs, lambda k: (cameras[pcams[k][0]].stage_models["averaged"],
                                                  cameras[pcams[k][1]].stage_models["averaged"]),
                                lambda k: pairs[k].refined.F),
        "global": _stage_cost(pairs, lambda k: (cameras[pcams[k][0]].model, cameras[pcams[k][1]].model),
                              lambda k: refined.pairs[k].F),
    }
    seq = [costs[s] for s in STAGES]
    monotone = all(b <= a * (1 + 1e-9) for a, b in zip(seq, seq[1:]))
    if not monotone:
        log.info("stage costs are not monotone: %s", ", ".join(f"{s}={costs[s]:.6g}" for s in STAGES))
    return CalibrationResult(cameras, all_pairs, costs, monotone, refined.history)


def stage_fa_re(result: CalibrationResult, gt_cameras: dict[str, CameraModel]) -> dict[str, dict[str, float]]:
    """FA-RE per camera and stage; per-pair stages report the mean over that camera's pair models."""
    out = {}
    for cid, cam in result.cameras.items():
        gt = gt_cameras[cid]
        frame = gt.frame

        def fa(model, pp=None):
            f = frame if pp is None else frame.with_principal_point(pp)
            return focal_adjusted_re(CameraModel(model, f), gt)

        row = {}
        for stage in STAGES:
            m = cam.stage_models[stage]
            if isinstance(m, list):
                row[stage] = float(np.mean([fa(x) for x in m]))
            else:
                row[stage] = fa(m, cam.principal_point if stage == "global" else None)
        out[cid] = row
    return out
