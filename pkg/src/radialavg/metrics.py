"""Reprojection-error metrics between an estimated and a ground-truth camera."""

from __future__ import annotations

import logging
import math

import numpy as np

from .geometry import CameraModel

log = logging.getLogger(__name__)

GRID = 64
LOG_FOCAL_BOUNDS = (math.log(0.1), math.log(10.0))
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def evaluation_pixels(frame, grid: int = GRID, dense: bool = False) -> np.ndarray:
    if dense:
        xs = np.arange(int(frame.width), dtype=float)
        ys = np.arange(int(frame.height), dtype=float)
    else:
        xs = np.linspace(0.0, frame.width - 1.0, grid)
        ys = np.linspace(0.0, frame.height - 1.0, grid)
    X, Y = np.meshgrid(xs, ys)
    return np.column_stack([X.ravel(), Y.ravel()])


def _check_frames(est: CameraModel, gt: CameraModel):
    if (est.frame.width, est.frame.height) != (gt.frame.width, gt.frame.height):
        raise ValueError("estimated and ground-truth frames differ in size")


class _Evaluator:
    def __init__(self, est: CameraModel, gt: CameraModel, grid: int, dense: bool, pixels=None):
        _check_frames(est, gt)
        self.est = est
        self.pixels = evaluation_pixels(gt.frame, grid, dense) if pixels is None else np.asarray(pixels, float)
        self.rays = gt.backproject(self.pixels)
        self.r_max = est.validity_radius()

    def __call__(self, scale: float = 1.0):
        cam = self.est.with_focal_scale(self.est.focal_scale * scale)
        proj = cam.project(self.rays)
        err = np.linalg.norm(proj - self.pixels, axis=1)
        ok = np.isfinite(err)
        skipped = int(err.size - ok.sum())
        if not ok.any():
            return np.inf, skipped
        return float(err[ok].mean()), skipped


def reprojection_error(est: CameraModel, gt: CameraModel, grid: int = GRID, dense: bool = False,
                       pixels=None) -> float:
    """Mean pixel distance between ``p`` and ``est.project(gt.backproject(p))``.

    Pixels without a valid back-projection or projection are skipped; a
    warning is logged when more than 10% are skipped.
    """
    ev = _Evaluator(est, gt, grid, dense, pixels)
    re, skipped = ev()
    _warn_skipped(skipped, ev.pixels.shape[0])
    return re


def _warn_skipped(skipped, total):
    if skipped > 0.1 * total:
        log.warning("reprojection error skipped %d of %d pixels", skipped, total)


def golden_section(f, lo: float, hi: float, tol: float):
    """Minimize a unimodal ``f`` on ``[lo, hi]``; returns ``(x, f(x))`` of the best point seen."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    best = min((fc, c), (fd, d))
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
            best = min(best, (fc, c))
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
            best = min(best, (fd, d))
    return best[1], best[0]


def focal_adjusted_re(est: CameraModel, gt: CameraModel, grid: int = GRID, dense: bool = False,
                      tol: float = 1e-12, pixels=None, return_scale: bool = False):
    """Reprojection error minimized over a global focal scale of ``est``.

    A coarse scan over ``log(scale)`` in ``[log 0.1, log 10]`` picks the
    basin, then golden-section search refines it.
    """
    ev = _Evaluator(est, gt, grid, dense, pixels)

    def objective(log_s):
        return ev(math.exp(log_s))[0]

    lo, hi = LOG_FOCAL_BOUNDS
    scan = np.linspace(lo, hi, 97)
    values = np.array([objective(s) for s in scan])
    k = int(np.argmin(values))
    a = scan[max(k - 1, 0)]
    b = scan[min(k + 1, scan.size - 1)]
    x, fx = golden_section(objective, a, b, tol)
    re0 = ev(1.0)[0]
    if re0 <= fx:
        x, fx = 0.0, re0
    _warn_skipped(ev(math.exp(x))[1], ev.pixels.shape[0])
    return (fx, math.exp(x)) if return_scale else fx


def align_focal_small_angle(model: CameraModel, dx: float | None = None) -> float:
    """Pixel focal length of the pinhole that matches ``model`` near its principal point.

    A pixel displaced by ``dx`` from the principal point is back-projected; the
    angle ``a`` between its ray and the principal ray gives ``f = dx / tan(a)``.
    """
    if dx is None:
        dx = model.frame.diag / 1000.0
    pix = model.frame.center + np.array([dx, 0.0])
    ray = model.backproject(pix[None, :])[0]
    angle = math.atan2(float(np.linalg.norm(ray)), 1.0)
    return dx / math.tan(angle)
