"""Resampling distorted images onto an ideal pinhole camera."""

from __future__ import annotations

import numpy as np
from scipy.ndimage import map_coordinates

from .geometry import CameraModel
from .metrics import align_focal_small_angle

INVALID = -1.0


def pinhole_remap(cam: CameraModel, focal_px: float | None = None) -> tuple[np.ndarray, float]:
    """Source pixel for every target pixel of a pinhole camera sharing ``cam``'s frame.

    The target camera has its principal point at ``cam``'s and focal length
    ``focal_px`` (by default the one matching ``cam`` near its center). Returns
    an ``(H, W, 2)`` grid of ``(x, y)`` source coordinates, with ``(-1, -1)``
    where the source falls outside the frame or the model is not invertible.
    """
    f = align_focal_small_angle(cam) if focal_px is None else float(focal_px)
    frame = cam.frame
    W, H = int(frame.width), int(frame.height)
    X, Y = np.meshgrid(np.arange(W, dtype=float), np.arange(H, dtype=float))
    c = frame.center
    rays = np.stack([(X - c[0]) / f, (Y - c[1]) / f], axis=-1).reshape(-1, 2)
    src = cam.project(rays)
    bad = ~np.all(np.isfinite(src), axis=1)
    bad |= (src[:, 0] < 0) | (src[:, 0] > W - 1) | (src[:, 1] < 0) | (src[:, 1] > H - 1)
    src[bad] = INVALID
    return src.reshape(H, W, 2), f


def apply_remap(image, grid: np.ndarray) -> np.ndarray:
    """Bilinear resampling of ``image`` at ``grid``; invalid cells become 0."""
    img = np.asarray(image)
    valid = grid[..., 0] >= 0
    coords = np.stack([grid[..., 1], grid[..., 0]])
    channels = img[..., None] if img.ndim == 2 else img
    out = np.empty(grid.shape[:2] + (channels.shape[2],), dtype=float)
    for k in range(channels.shape[2]):
        out[..., k] = map_coordinates(channels[..., k].astype(float), coords, order=1, mode="nearest")
    out[~valid] = 0.0
    if np.issubdtype(img.dtype, np.integer):
        info = np.iinfo(img.dtype)
        out = np.clip(np.rint(out), info.min, info.max)
    out = out.astype(img.dtype)
    return out[..., 0] if img.ndim == 2 else out
