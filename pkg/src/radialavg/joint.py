"""Joint robust refinement of all fundamental matrices and per-camera models.

Each outer round runs one LM pass over every pair's F (7 local parameters)
and every camera's free distortion coefficients with principal points held
fixed, optionally a second LM pass over principal points alone, and then
re-classifies inliers over all correspondences.

The normal equations are block sparse: a pair couples only its own F block
with its one or two cameras. The F blocks are eliminated per pair (Schur
complement), so only the small camera system is ever formed densely.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import DivisionModel, FundamentalMatrix, ImageFrame
from .lm import LMSettings, levenberg_marquardt
from .sampson import regularization_residuals, sampson_residuals

log = logging.getLogger(__name__)

MIN_PAIR_INLIERS = 8
MIN_START_INLIERS = 15


class GlobalRefinementError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class CameraState:
    model: DivisionModel
    frame: ImageFrame


@dataclass(frozen=True, eq=False)
class PairState:
    image_a: str
    image_b: str
    camera_a: str
    camera_b: str
    F: FundamentalMatrix
    points_a: np.ndarray
    points_b: np.ndarray
    inlier_mask: np.ndarray

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


@dataclass(eq=False)
class GlobalProblem:
    cameras: dict[str, CameraState]
    pairs: list[PairState]
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        used = set()
        for pr in self.pairs:
            for c in (pr.camera_a, pr.camera_b):
                if c not in self.cameras:
                    raise ValueError(f"pair {pr.image_a}-{pr.image_b} references unknown camera {c}")
                used.add(c)
        unused = set(self.cameras) - used
        if unused:
            raise ValueError(f"cameras without pairs: {sorted(unused)}")


@dataclass(frozen=True)
class GlobalConfig:
    n_outer: int = 3
    threshold_px: float = 2.0
    loss: str = "cauchy"
    robust_scale_px: float | None = None
    optimize_centers: bool = False
    center_box: float = 0.1
    min_center_coverage: float = 0.3
    reg_weight: float = 0.0
    reg_samples: int = 128
    reclassify_all: bool = True
    centers_fix_F: bool = False
    even_powers_only: bool = False
    lm: LMSettings = LMSettings()

    def __post_init__(self):
        if self.n_outer < 1:
            raise ValueError("n_outer must be >= 1")
        if self.loss not in ("cauchy", "trivial"):
            raise ValueError(f"unknown loss {self.loss!r}")

    @property
    def scale(self) -> float:
        return self.robust_scale_px if self.robust_scale_px is not None else self.threshold_px / 2.0


def cauchy_rho(r, c: float):
    """``c^2 * log(1 + r^2 / c^2)``."""
    if not c > 0:
        raise ValueError("Cauchy scale must be positive")
    r = np.asarray(r, dtype=float)
    return c * c * np.log1p((r / c) ** 2)


def _robustify(e, loss: str, c: float):
    """Map residuals to ``sign(e) * sqrt(rho(e))`` and return the chain factor ``d/de``."""
    if loss == "trivial":
        return e, np.ones_like(e)
    rho = cauchy_rho(e, c)
    s = np.sqrt(rho)
    ae = np.abs(e)
    x = (e / c) ** 2
    with np.errstate(invalid="ignore", divide="ignore"):
        factor = np.where(ae > 1e-8 * c, ae / ((1.0 + x) * np.where(s > 0, s, 1.0)),
                          1.0 - 0.75 * x)
    return np.sign(e) * s, factor


def _pair_geometry(pr: PairState, cameras, mask=None):
    ca, cb = cameras[pr.camera_a], cameras[pr.camera_b]
    m = pr.inlier_mask if mask is None else mask
    p = ca.frame.normalize(pr.points_a[m])
    q = cb.frame.normalize(pr.points_b[m])
    scale = 0.5 * (ca.frame.diag + cb.frame.diag)
    return p, q, scale


def pair_residuals_px(pr: PairState, cameras, F=None, mask=None) -> np.ndarray:
    """Signed Sampson residuals in pixels (NaN for degenerate rows)."""
    p, q, scale = _pair_geometry(pr, cameras, mask)
    ca, cb = cameras[pr.camera_a], cameras[pr.camera_b]
    return scale * sampson_residuals(p, q, F if F is not None else pr.F, ca.model, cb.model)


def robust_cost(problem: GlobalProblem, cfg: GlobalConfig, Fs=None, cameras=None) -> float:
    cameras = cameras if cameras is not None else problem.cameras
    total = 0.0
    for k, pr in enumerate(problem.pairs):
        if pr.n_inliers < MIN_PAIR_INLIERS:
            continue
        e = pair_residuals_px(pr, cameras, Fs[k] if Fs is not None else None)
        e = e[np.isfinite(e)]
        total += float(np.sum(e * e if cfg.loss == "trivial" else cauchy_rho(e, cfg.scale)))
    if cfg.reg_weight > 0:
        for cam in cameras.values():
            rr = regularization_residuals(cam.model, cam.frame.max_radius(), cfg.reg_samples, cfg.reg_weight)
            total += float(rr @ rr)
    return total


class _Blocks:
    """Camera parameter blocks of one LM pass.

    ``kind="models"`` makes the free distortion coefficients of every camera
    variable; ``kind="centers"`` makes the principal points of ``center_ids``
    variable (clamped to ``boxes``). Fundamental matrices are variable when
    ``free_F`` is set. ``even_only`` freezes the odd-power coefficients.
    """

    def __init__(self, cameras, kind: str = "models", center_ids=(), boxes=None, free_F: bool = True,
                 even_only: bool = False):
        self.kind = kind
        self.free_F = free_F
        self.ids = sorted(cameras)
        self.mask = {}
        if kind == "models":
            self.size = {c: cameras[c].model.powers.size for c in self.ids}
            for c in self.ids:
                powers = cameras[c].model.powers
                self.mask[c] = (powers % 2 == 0) if even_only else np.ones(powers.size, bool)
        else:
            self.size = {c: (2 if c in center_ids else 0) for c in self.ids}
        self.boxes = boxes or {}
        self.offset = {}
        o = 0
        for c in self.ids:
            self.offset[c] = o
            o += self.size[c]
        self.total = o

    def cols(self, c):
        return np.arange(self.offset[c], self.offset[c] + self.size[c])

    def values(self, cameras):
        if self.kind == "models":
            return {c: cameras[c].model.free.copy() for c in self.ids}
        return {c: np.array(cameras[c].frame.center, float) for c in self.ids if self.size[c]}

    def apply(self, cameras, values):
        out = dict(cameras)
        for c, v in values.items():
            if self.kind == "models":
                out[c] = replace(out[c], model=DivisionModel.from_free(v))
            else:
                out[c] = replace(out[c], frame=out[c].frame.with_principal_point(v))
        return out

    def step(self, values, delta):
        new = {}
        for c, v in values.items():
            d = delta[self.cols(c)]
            y = v + (d * self.mask[c] if c in self.mask else d)
            if c in self.boxes:
                y = np.clip(y, *self.boxes[c])
            new[c] = y
        return new

    def camera_jacobian(self, pr, cameras, J):
        """Columns for this pair's cameras from a ``SampsonJacobian``."""
        if self.kind == "models":
            return np.hstack([J.theta_a * self.mask[pr.camera_a], J.theta_b * self.mask[pr.camera_b]])
        # moving the principal point by dc shifts normalized points by -dc / diag
        parts = []
        if self.size[pr.camera_a]:
            parts.append(-J.p / cameras[pr.camera_a].frame.diag)
        if self.size[pr.camera_b]:
            parts.append(-J.q / cameras[pr.camera_b].frame.diag)
        return np.hstack(parts) if parts else np.zeros((J.p.shape[0], 0))

    def pair_cols(self, pr):
        return np.concatenate([self.cols(pr.camera_a), self.cols(pr.camera_b)]).astype(int)


def _active(problem):
    return [k for k, pr in enumerate(problem.pairs) if pr.n_inliers >= MIN_PAIR_INLIERS]


def _pair_block(pr: PairState, cameras, F: FundamentalMatrix, cfg: GlobalConfig, blocks: _Blocks):
    """Robust residuals of one pair and their Jacobians w.r.t. its F and camera parameters."""
    p, q, scale = _pair_geometry(pr, cameras)
    models = blocks.kind == "models"
    e, J = sampson_residuals(p, q, F, cameras[pr.camera_a].model, cameras[pr.camera_b].model,
                             jacobian=True, point_jacobian=not models)
    ok = np.isfinite(e)
    e = np.where(ok, e, 0.0) * scale
    r, factor = _robustify(e, cfg.loss, cfg.scale)
    w = (scale * factor * ok)[:, None]
    JF = w * (J.F @ F.local_jacobian())
    JC = w * blocks.camera_jacobian(pr, cameras, J)
    return r, JF, JC, blocks.pair_cols(pr)


def _reg_blocks(cameras, cfg, blocks):
    if blocks.kind != "models" or cfg.reg_weight <= 0:
        return []
    out = []
    for c in blocks.ids:
        cam = cameras[c]
        rr, Jr = regularization_residuals(cam.model, cam.frame.max_radius(), cfg.reg_samples,
                                          cfg.reg_weight, jacobian=True)
        out.append((rr, Jr * blocks.mask[c], blocks.cols(c)))
    return out


def _dense_system(problem, cfg, blocks):
    n_pairs = len(problem.pairs)
    nf = 7 * n_pairs if blocks.free_F else 0
    rows_r, rows_J = [], []
    for k in _active(problem):
        pr = problem.pairs[k]
        r, JF, JC, cols = _pair_block(pr, problem.cameras, pr.F, cfg, blocks)
        J = np.zeros((r.size, nf + blocks.total))
        if blocks.free_F:
            J[:, 7 * k:7 * k + 7] = JF
        np.add.at(J.T, nf + cols, JC.T)
        rows_r.append(r)
        rows_J.append(J)
    for rr, Jr, cols in _reg_blocks(problem.cameras, cfg, blocks):
        J = np.zeros((rr.size, nf + blocks.total))
        J[:, nf + cols] = Jr
        rows_r.append(rr)
        rows_J.append(J)
    return np.concatenate(rows_r), np.vstack(rows_J)


def stacked_system(problem: GlobalProblem, cfg: GlobalConfig = GlobalConfig()):
    """Dense residual vector and Jacobian of the model pass.

    Columns are ``[7 per pair | free coefficients per camera (sorted ids)]``;
    the sum of squared residuals equals :func:`robust_cost`. Meant for
    inspection and testing; the solver never forms this matrix.
    """
    return _dense_system(problem, cfg, _Blocks(problem.cameras, even_only=cfg.even_powers_only))


def center_system(problem: GlobalProblem, cfg: GlobalConfig, cams_opt: list[str], free_F: bool = True):
    """Like :func:`stacked_system` for the principal points of ``cams_opt`` (2 columns each)."""
    return _dense_system(problem, replace(cfg, reg_weight=0.0),
                         _Blocks(problem.cameras, "centers", set(cams_opt), free_F=free_F))


def _damp(H, mu):
    d = np.diag(H).copy()
    floor = max(float(d.max(initial=0.0)) * 1e-12, 1e-300)
    return H + np.diag(mu * np.maximum(d, floor))


def _normal_equations(problem, cfg, blocks, Fs, cameras):
    nc = blocks.total
    Hcc = np.zeros((nc, nc))
    gc = np.zeros(nc)
    pair_terms = []
    for k in _active(problem):
        r, JF, JC, cols = _pair_block(problem.pairs[k], cameras, Fs[k], cfg, blocks)
        np.add.at(Hcc, (cols[:, None], cols[None, :]), JC.T @ JC)
        np.add.at(gc, cols, JC.T @ r)
        if blocks.free_F:
            pair_terms.append((k, JF.T @ JF, JF.T @ JC, JF.T @ r, cols))
    for rr, Jr, cols in _reg_blocks(cameras, cfg, blocks):
        Hcc[np.ix_(cols, cols)] += Jr.T @ Jr
        gc[cols] += Jr.T @ rr
    return pair_terms, Hcc, gc


def _schur_solve(n_pairs, nc):
    def solve(system, mu):
        pair_terms, Hcc, gc = system
        S = _damp(Hcc, mu)
        rhs = -gc.copy()
        elim = []
        for k, Hff, Hfc, gf, cols in pair_terms:
            try:
                X = np.linalg.solve(_damp(Hff, mu), np.column_stack([Hfc, gf]))
            except np.linalg.LinAlgError:
                return None
            # S -= Hcf Hff^-1 Hfc ; rhs += Hcf Hff^-1 gf
            np.add.at(S, (cols[:, None], cols[None, :]), -Hfc.T @ X[:, :-1])
            np.add.at(rhs, cols, Hfc.T @ X[:, -1])
            elim.append((k, X, cols))
        try:
            dc = np.linalg.solve(S, rhs) if nc else np.zeros(0)
        except np.linalg.LinAlgError:
            return None
        step = np.zeros(7 * n_pairs + nc)
        for k, X, cols in elim:
            # dF = -Hff^-1 (gf + Hfc dc)
            step[7 * k:7 * k + 7] = -(X[:, -1] + X[:, :-1] @ dc[cols])
        step[7 * n_pairs:] = dc
        return step
    return solve


def _run_pass(problem: GlobalProblem, cfg: GlobalConfig, blocks: _Blocks):
    n_pairs = len(problem.pairs)
    state0 = ([pr.F for pr in problem.pairs], blocks.values(problem.cameras))
    if blocks.kind != "models":
        cfg = replace(cfg, reg_weight=0.0)

    def cost(state):
        try:
            return robust_cost(problem, cfg, state[0], blocks.apply(problem.cameras, state[1]))
        except ValueError:
            return np.inf

    def linearize(state):
        return _normal_equations(problem, cfg, blocks, state[0], blocks.apply(problem.cameras, state[1]))

    def retract(state, step):
        Fs, vals = state
        if blocks.free_F:
            Fs = [F.retract(step[7 * k:7 * k + 7]) for k, F in enumerate(Fs)]
        try:
            return (Fs, blocks.step(vals, step[7 * n_pairs:]))
        except ValueError:
            return state

    res = levenberg_marquardt(state0, cost, linearize, _schur_solve(n_pairs, blocks.total), retract, cfg.lm)
    Fs, vals = res.x
    pairs = [replace(pr, F=F.canonical()) for pr, F in zip(problem.pairs, Fs)]
    return GlobalProblem(blocks.apply(problem.cameras, vals), pairs, list(problem.history)), res


def _pass1(problem: GlobalProblem, cfg: GlobalConfig):
    return _run_pass(problem, cfg, _Blocks(problem.cameras, even_only=cfg.even_powers_only))


def _center_cameras(problem: GlobalProblem, cfg: GlobalConfig, coverage: dict[str, float] | None):
    if coverage is None:
        return list(sorted(problem.cameras))
    return [c for c in sorted(problem.cameras) if coverage.get(c, 0.0) > cfg.min_center_coverage]


def _pass2(problem: GlobalProblem, cfg: GlobalConfig, cams_opt: list[str]):
    """LM over principal points of ``cams_opt`` (and F unless ``cfg.centers_fix_F``), models fixed."""
    boxes = {}
    for c in cams_opt:
        f = problem.cameras[c].frame
        half = np.array([cfg.center_box * f.width, cfg.center_box * f.height])
        mid = np.array([f.width / 2.0, f.height / 2.0])
        boxes[c] = (mid - half, mid + half)
    blocks = _Blocks(problem.cameras, "centers", set(cams_opt), boxes, free_F=not cfg.centers_fix_F)
    return _run_pass(problem, cfg, blocks)


def reclassify_inliers(problem: GlobalProblem, cfg: GlobalConfig) -> GlobalProblem:
    pairs = []
    for pr in problem.pairs:
        mask = np.ones(pr.points_a.shape[0], bool) if cfg.reclassify_all else pr.inlier_mask
        e = pair_residuals_px(pr, problem.cameras, mask=mask)
        new = np.zeros_like(pr.inlier_mask)
        new[np.flatnonzero(mask)] = np.isfinite(e) & (e * e < cfg.threshold_px**2)
        pairs.append(replace(pr, inlier_mask=new))
    for c in problem.cameras:
        n = sum(pr.n_inliers for pr in pairs if c in (pr.camera_a, pr.camera_b))
        if n == 0:
            raise GlobalRefinementError(f"camera {c} lost all inliers")
    return GlobalProblem(problem.cameras, pairs, list(problem.history))


def global_refine(problem: GlobalProblem, cfg: GlobalConfig = GlobalConfig(),
                  coverage: dict[str, float] | None = None) -> GlobalProblem:
    """Outer loop of joint refinement and inlier re-estimation.

    ``coverage`` maps camera id to its mean coverage weight; principal points
    are only optimized for cameras above ``cfg.min_center_coverage`` (all
    cameras when ``coverage`` is None).
    """
    low = [f"{pr.image_a}-{pr.image_b}" for pr in problem.pairs if pr.n_inliers < MIN_START_INLIERS]
    if low:
        raise ValueError(f"pairs with fewer than {MIN_START_INLIERS} inliers: {', '.join(low)}")
    current = GlobalProblem(problem.cameras, list(problem.pairs), list(problem.history))
    for rnd in range(cfg.n_outer):
        before = robust_cost(current, cfg)
        nxt, res = _pass1(current, cfg)
        if not np.isfinite(res.cost):
            log.warning("global refinement round %d produced a non-finite cost; stopping", rnd)
            break
        entry = {"round": rnd, "pass": "models", "initial_cost": before, "cost": res.cost,
                 "iterations": res.iterations, "status": res.status}
        nxt.history.append(entry)
        current = nxt
        if cfg.optimize_centers:
            cams_opt = _center_cameras(current, cfg, coverage)
            if cams_opt:
                nxt, res2 = _pass2(current, cfg, cams_opt)
                if np.isfinite(res2.cost):
                    nxt.history.append({"round": rnd, "pass": "centers", "initial_cost": res2.initial_cost,
                                        "cost": res2.cost, "iterations": res2.iterations,
                                        "status": res2.status})
                    current = nxt
        current = reclassify_inliers(current, cfg)
    return current
