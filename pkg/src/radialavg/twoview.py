"""Per-pair robust estimation and nonlinear refinement.

``lo_ransac_pair`` finds a one-parameter initialization and the inlier set;
``refine_pair`` lifts it to degree-k division models by minimizing the summed
Sampson error plus a smoothness regularizer on each undistortion function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .averaging import coverage_weight
from .geometry import CorrespondenceSet, DivisionModel, FundamentalMatrix
from .lm import LMResult, LMSettings, dense_solver, levenberg_marquardt
from .minimal import MinimalHypothesis, refine_two_sided_lambda, solve_shared_lambda
from .sampson import regularization_residuals, sampson_residuals

SAMPLE_SIZE = 9
MIN_INLIERS = 15


@dataclass(frozen=True)
class RansacConfig:
    threshold_px: float = 2.0
    max_iterations: int = 2000
    confidence: float = 0.999
    lo_steps: int = 10
    final_steps: int = 100
    seed: int = 0
    min_inliers: int = MIN_INLIERS

    def __post_init__(self):
        if not self.threshold_px > 0:
            raise ValueError("threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")


@dataclass(frozen=True)
class RegularizerConfig:
    """Smoothness term weight.

    ``weight`` is the raw multiplier; when ``None`` it is ``per_inlier`` times
    the inlier count. The data term it competes with is in squared pixels.
    """

    weight: float | None = None
    per_inlier: float = 1e-3
    n_samples: int = 128

    def __post_init__(self):
        if (self.weight is not None and self.weight < 0) or self.per_inlier < 0:
            raise ValueError("regularizer weight must be >= 0")
        if self.n_samples < 16:
            raise ValueError("need at least 16 quadrature samples")

    def effective(self, n_inliers: int) -> float:
        return self.weight if self.weight is not None else self.per_inlier * n_inliers


@dataclass(frozen=True, eq=False)
class TwoViewEstimate:
    F: FundamentalMatrix
    model_a: DivisionModel
    model_b: DivisionModel
    inlier_mask: np.ndarray
    cost: float
    coverage_a: float = 0.0
    coverage_b: float = 0.0
    rejected: bool = False
    refined: bool = False
    iterations: int = 0
    warnings: tuple[str, ...] = field(default_factory=tuple)

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inlier_mask))


def _finite(e):
    ok = np.isfinite(e)
    return np.where(ok, e, 0.0), ok


def refine_models(p, q, F: FundamentalMatrix, model_a: DivisionModel, model_b: DivisionModel,
                  reg_weight: float = 0.0, radius_a: float = 1.0, radius_b: float = 1.0,
                  n_samples: int = 128, settings: LMSettings = LMSettings(),
                  even_powers_only: bool = False, pixel_scale: float = 1.0) -> LMResult:
    """LM over ``(F, free coeffs of a, free coeffs of b)``; ``result.x`` is ``(F, model_a, model_b)``.

    The objective is ``sum (pixel_scale * e_i)^2 + reg_weight * (reg(model_a) + reg(model_b))``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    ma_n = model_a.powers.size
    mb_n = model_b.powers.size
    mask_a = (model_a.powers % 2 == 0) if even_powers_only else np.ones(ma_n, bool)
    mask_b = (model_b.powers % 2 == 0) if even_powers_only else np.ones(mb_n, bool)

    def residuals(x, jac=False):
        F_, a_, b_ = x
        out = sampson_residuals(p, q, F_, a_, b_, jacobian=jac)
        e, J = out if jac else (out, None)
        e, _ = _finite(e)
        parts = [pixel_scale * e]
        if jac:
            blocks = [pixel_scale * np.hstack([J.F @ F_.local_jacobian(), J.theta_a * mask_a,
                                               J.theta_b * mask_b])]
        if reg_weight > 0:
            for k, (m, R) in enumerate(((a_, radius_a), (b_, radius_b))):
                rr = regularization_residuals(m, R, n_samples, reg_weight, jacobian=jac)
                if jac:
                    rr, Jr = rr
                    row = np.zeros((rr.size, 7 + ma_n + mb_n))
                    if k == 0:
                        row[:, 7:7 + ma_n] = Jr * mask_a
                    else:
                        row[:, 7 + ma_n:] = Jr * mask_b
                    blocks.append(row)
                parts.append(rr)
        r = np.concatenate(parts)
        return (r, np.vstack(blocks)) if jac else r

    def cost(x):
        r = residuals(x)
        return float(r @ r) if np.all(np.isfinite(r)) else np.inf

    def retract(x, step):
        F_, a_, b_ = x
        try:
            na = DivisionModel.from_free(a_.free + step[7:7 + ma_n] * mask_a)
            nb = DivisionModel.from_free(b_.free + step[7 + ma_n:] * mask_b)
        except ValueError:
            return x
        return (F_.retract(step[:7]), na, nb)

    return levenberg_marquardt((F, model_a, model_b), cost, lambda x: residuals(x, True),
                               dense_solver, retract, settings)


def _score(p, q, F, ma, mb, thr2):
    e = sampson_residuals(p, q, F, ma, mb)
    r2 = np.where(np.isnan(e), np.inf, e * e)
    inl = r2 < thr2
    return inl, float(np.sum(r2[inl]))


def _better(count, cost, best):
    return best is None or count > best[0] or (count == best[0] and cost < best[1])


def lo_ransac_pair(corr: CorrespondenceSet, cfg: RansacConfig = RansacConfig()) -> TwoViewEstimate:
    """LO-RANSAC around the nine-point solver with two-sided local optimization."""
    n = len(corr)
    if n < SAMPLE_SIZE:
        raise ValueError(f"need at least {SAMPLE_SIZE} correspondences, got {n}")
    p, q = corr.normalized()
    thr = cfg.threshold_px / corr.mean_diag
    thr2 = thr * thr
    rng = np.random.default_rng(cfg.seed)

    best = None  # (count, cost, hypothesis, mask)
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, SAMPLE_SIZE, replace=False)
        for hyp in solve_shared_lambda(p[idx], q[idx]):
            ma, mb = hyp.models()
            inl, c = _score(p, q, hyp.F, ma, mb, thr2)
            count = int(inl.sum())
            if not _better(count, c, best):
                continue
            best = (count, c, hyp, inl)
            best = _local_optimization(p, q, best, thr2, cfg.lo_steps)
            w = best[0] / n
            needed = _required_iterations(w, cfg.confidence)

    if best is None:
        F = FundamentalMatrix.from_matrix(np.eye(3) - np.diag([0, 0, 1.0]))
        m = DivisionModel.identity()
        return TwoViewEstimate(F, m, m, np.zeros(n, bool), np.inf, rejected=True, iterations=it,
                               warnings=("no hypothesis",))
    best = _local_optimization(p, q, best, thr2, cfg.final_steps, rounds=3)
    count, c, hyp, inl = best
    c *= corr.mean_diag**2
    ma, mb = hyp.models()
    cov_a = coverage_weight(corr.points_a[inl], corr.frame_a) if count >= 3 else 0.0
    cov_b = coverage_weight(corr.points_b[inl], corr.frame_b) if count >= 3 else 0.0
    return TwoViewEstimate(hyp.F, ma, mb, inl, c, cov_a, cov_b,
                           rejected=count < cfg.min_inliers, iterations=it)


def _local_optimization(p, q, best, thr2, steps, rounds: int = 2):
    for _ in range(rounds):
        count, c, hyp, inl = best
        if count < SAMPLE_SIZE + 1:
            break
        refined = refine_two_sided_lambda(hyp, p[inl], q[inl], iterations=steps)
        if not refined.refined:
            break
        ma, mb = refined.models()
        inl2, c2 = _score(p, q, refined.F, ma, mb, thr2)
        count2 = int(inl2.sum())
        if not _better(count2, c2, best[:2]):
            break
        best = (count2, c2, refined, inl2)
    return best


def _required_iterations(inlier_ratio: float, confidence: float) -> int:
    good = inlier_ratio**SAMPLE_SIZE
    if good >= 1.0:
        return 1
    if good <= 0.0:
        return 10**9
    return int(math.ceil(math.log(1.0 - confidence) / math.log1p(-good)))


def pair_objective(est: TwoViewEstimate, corr: CorrespondenceSet) -> float:
    """Summed Sampson error of ``est`` over its inliers, in squared pixels."""
    p, q = corr.normalized()
    m = est.inlier_mask
    e = sampson_residuals(p[m], q[m], est.F, est.model_a, est.model_b) * corr.mean_diag
    e = e[np.isfinite(e)]
    return float(e @ e)


def refine_pair(est: TwoViewEstimate, corr: CorrespondenceSet, degree: int = 4,
                reg: RegularizerConfig = RegularizerConfig(), settings: LMSettings = LMSettings(),
                even_powers_only: bool = False) -> TwoViewEstimate:
    """Degree-``degree`` Sampson refinement of a pair over its inlier set."""
    if degree < 2:
        raise ValueError("degree must be >= 2")
    p, q = corr.normalized()
    m = est.inlier_mask
    n_inl = int(m.sum())
    if n_inl == 0:
        raise ValueError("estimate has no inliers")
    ma = est.model_a.with_degree(max(degree, est.model_a.degree))
    mb = est.model_b.with_degree(max(degree, est.model_b.degree))
    Ra = corr.frame_a.max_radius()
    Rb = corr.frame_b.max_radius()
    res = refine_models(p[m], q[m], est.F, ma, mb, reg_weight=reg.effective(n_inl),
                        radius_a=Ra, radius_b=Rb, n_samples=reg.n_samples, settings=settings,
                        even_powers_only=even_powers_only, pixel_scale=corr.mean_diag)
    if not res.ok or not np.isfinite(res.cost):
        return replace(est, refined=False, warnings=est.warnings + ("refinement diverged",))
    F, ma, mb = res.x
    warnings = list(est.warnings)
    for name, model, R in (("a", ma, Ra), ("b", mb, Rb)):
        if np.any(model.radial_undistort_derivative(np.linspace(0, R, 256)) <= 0):
            warnings.append(f"model {name} not monotone on image support")
    e = sampson_residuals(p[m], q[m], F, ma, mb) * corr.mean_diag
    e = e[np.isfinite(e)]
    return replace(est, F=F.canonical(), model_a=ma, model_b=mb, cost=float(e @ e), refined=True,
                   warnings=tuple(warnings))
