"""Fusion of several per-pair distortion estimates of one camera.

The averaged model minimizes the weighted squared difference of the
distortion factors ``d(r)`` over the image disk, which in polar form is the
``r**3``-weighted radial integral

    sum_i w_i * int_0^R (d(r) - d_i(r))**2 r**3 dr.

``mode="divisional"`` uses ``d = 1/h`` (the model used everywhere else);
``mode="multiplicative"`` uses ``d = h``, for which the optimum is the
weighted coefficient mean and serves as a closed-form check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import DivisionModel, ImageFrame
from .lm import LMSettings, least_squares_lm

MIN_COVERAGE = 0.01


class AveragingError(ValueError):
    pass


def coverage_weight(points, frame: ImageFrame) -> float:
    """Convex-hull area of pixel ``points`` over the frame area, clipped to ``[0, 1]``."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if pts.shape[0] < 3:
        raise ValueError("coverage needs at least 3 points")
    try:
        area = ConvexHull(pts).volume
    except QhullError:
        return 0.0
    return float(np.clip(area / frame.area, 0.0, 1.0))


@dataclass(frozen=True, eq=False)
class WeightedModelSet:
    models: tuple[DivisionModel, ...]
    weights: np.ndarray
    radius: float

    def __post_init__(self):
        models = tuple(self.models)
        w = np.asarray(self.weights, dtype=float).ravel()
        if len(models) == 0 or w.size != len(models):
            raise ValueError("need one weight per model and at least one model")
        if np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError("weights must be nonnegative and sum to 1")
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        object.__setattr__(self, "models", models)
        object.__setattr__(self, "weights", w)

    @classmethod
    def normalized(cls, models, weights, radius: float, floor: float = 0.0) -> "WeightedModelSet":
        """Drop weights below ``floor`` and rescale the rest to sum to one."""
        w = np.asarray(weights, dtype=float)
        keep = w >= floor
        if not np.any(keep) or w[keep].sum() <= 0:
            raise AveragingError("no model with usable weight")
        models = [m for m, k in zip(models, keep) if k]
        w = w[keep] / w[keep].sum()
        return cls(tuple(models), w, radius)


@dataclass(frozen=True)
class AveragingConfig:
    out_degree: int | None = None
    n_quad: int = 256
    mode: str = "divisional"
    even_powers_only: bool = False
    lm: LMSettings = LMSettings(max_iterations=200, rel_tol=1e-14)

    def __post_init__(self):
        if self.out_degree is not None and self.out_degree < 2:
            raise ValueError("output degree must be >= 2")
        if self.mode not in ("divisional", "multiplicative"):
            raise ValueError(f"unknown averaging mode {self.mode!r}")


def trapezoid_nodes(radius: float, n: int):
    r = np.linspace(0.0, radius, n)
    w = np.full(n, radius / (n - 1))
    w[[0, -1]] *= 0.5
    return r, w


def _factor(model: DivisionModel, r, mode: str):
    h = model.h(r)
    return h if mode == "multiplicative" else 1.0 / h


def weighted_mean(models, weights, degree: int) -> np.ndarray:
    """Coefficient-wise weighted mean, zero-padded to ``degree``."""
    acc = np.zeros(degree + 1)
    for m, w in zip(models, weights):
        c = m.coeffs[: degree + 1]
        acc[: c.size] += w * c
    return acc / np.sum(weights)


def averaging_objective(model: DivisionModel, wset: WeightedModelSet, n_quad: int = 256,
                        mode: str = "divisional") -> float:
    r, w = trapezoid_nodes(wset.radius, n_quad)
    d = _factor(model, r, mode)
    total = 0.0
    for m, om in zip(wset.models, wset.weights):
        total += om * np.sum(w * r**3 * (d - _factor(m, r, mode)) ** 2)
    return float(total)


def average_divisional(wset: WeightedModelSet, cfg: AveragingConfig = AveragingConfig()) -> DivisionModel:
    """Functional least-squares average of ``wset`` (see module docstring)."""
    mode = cfg.mode
    R = wset.radius
    if mode == "divisional":
        keep = [m.is_valid(R) for m in wset.models]
        if not any(keep):
            raise AveragingError("every input model is invalid on [0, R]")
        if not all(keep):
            wset = WeightedModelSet.normalized(
                [m for m, k in zip(wset.models, keep) if k], wset.weights[keep], R)
    degree = cfg.out_degree or max(m.degree for m in wset.models)
    init = weighted_mean(wset.models, wset.weights, degree)

    r, w = trapezoid_nodes(R, cfg.n_quad)
    targets = np.stack([_factor(m, r, mode) for m in wset.models])  # (n_models, n_quad)
    sw = np.sqrt(wset.weights[:, None] * (w * r**3)[None, :])  # (n_models, n_quad)
    powers = np.arange(2, degree + 1)
    free_cols = (powers % 2 == 0) if cfg.even_powers_only else np.ones(powers.size, bool)
    rj = r[:, None] ** powers[free_cols]

    def residual(free):
        h = 1.0 + rj @ free
        if mode == "divisional":
            if np.any(h <= 0):
                return np.full(targets.size, np.inf)
            d = 1.0 / h
        else:
            d = h
        return (sw * (d[None, :] - targets)).ravel()

    def residual_and_jacobian(free):
        h = 1.0 + rj @ free
        res = residual(free)
        dd = rj if mode == "multiplicative" else -rj / (h**2)[:, None]
        J = (sw[:, :, None] * dd[None, :, :]).reshape(-1, dd.shape[1])
        return res, J

    x0 = init[2:][free_cols]
    result = least_squares_lm(x0, residual_and_jacobian, cfg.lm, residual=residual)
    free = np.zeros(powers.size)
    free[free_cols] = result.x if np.isfinite(result.cost) and result.cost <= result.initial_cost else x0
    return DivisionModel.from_free(free)


def average_multiplicative_closed_form(wset: WeightedModelSet) -> np.ndarray:
    """Weighted coefficient mean, the exact optimum for multiplicative models."""
    degree = max(m.degree for m in wset.models)
    return weighted_mean(wset.models, wset.weights, degree)


def moment_matrix(radius: float, degree: int) -> np.ndarray:
    """``A[t, j] = R**(j+t+4) / (j+t+4)``: Gram matrix of the multiplicative objective."""
    j = np.arange(degree + 1)
    e = j[:, None] + j[None, :] + 4
    return radius**e / e
