"""Synthetic multi-view scenes with known distortion, for verification."""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .geometry import CameraModel, CorrespondenceSet, DivisionModel, FundamentalMatrix, ImageFrame

DEFAULT_MODEL = (1.0, 0.0, -0.6, 0.0, 0.2)


@dataclass(frozen=True)
class SceneConfig:
    n_images: int = 10
    camera_of_image: tuple[str, ...] | None = None
    gt_models: dict = field(default_factory=lambda: {"cam0": DEFAULT_MODEL})
    principal_points: dict = field(default_factory=dict)
    focal_scale: float = 0.6
    width: int = 512
    height: int = 512
    motion: str = "orbit"
    orbit_radius: float = 2.0
    orbit_spread_deg: float = 35.0
    look_jitter: float = 0.15
    cloud_radius: float = 4.0
    min_depth: float = 0.5
    n_points_3d: int = 6000
    matches_per_pair: int = 300
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 2:
            raise ValueError("need at least two images")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.outlier_fraction < 1:
            raise ValueError("outlier_fraction must lie in [0, 1)")
        if self.motion not in ("orbit", "forward"):
            raise ValueError(f"unknown motion {self.motion!r}")

    def cameras_for_images(self) -> list[str]:
        if self.camera_of_image is not None:
            if len(self.camera_of_image) != self.n_images:
                raise ValueError("camera_of_image must list one camera per image")
            return list(self.camera_of_image)
        return [sorted(self.gt_models)[0]] * self.n_images


@dataclass
class GroundTruth:
    cameras: dict[str, CameraModel]
    image_cameras: dict[str, str]
    fundamentals: dict[tuple[str, str], FundamentalMatrix]
    inlier_labels: dict[tuple[str, str], np.ndarray]


def look_at(center, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rotation with +z towards ``target`` and +y roughly ``up``."""
    z = np.asarray(target, float) - np.asarray(center, float)
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(up, float), z)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross((1.0, 0.0, 0.0), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.stack([x, y, z])


def _poses(cfg: SceneConfig, rng):
    poses = []
    if cfg.motion == "forward":
        for i in range(cfg.n_images):
            C = np.array([0.0, 0.0, -cfg.orbit_radius - 0.25 * i])
            poses.append((np.eye(3), C))
        return poses
    spread = np.deg2rad(cfg.orbit_spread_deg)
    for _ in range(cfg.n_images):
        polar = spread * np.sqrt(rng.uniform())
        az = rng.uniform(0, 2 * np.pi)
        d = np.array([np.sin(polar) * np.cos(az), np.sin(polar) * np.sin(az), -np.cos(polar)])
        C = cfg.orbit_radius * d
        target = rng.normal(scale=cfg.look_jitter, size=3)
        up = (np.sin(rng.uniform(-0.3, 0.3)), np.cos(rng.uniform(-0.3, 0.3)), 0.0)
        poses.append((look_at(C, target, up), C))
    return poses


def _points(cfg: SceneConfig, rng):
    if cfg.motion == "forward":
        n = cfg.n_points_3d
        z = rng.uniform(1.0, 8.0, n)
        xy = rng.uniform(-1.2, 1.2, (n, 2)) * z[:, None]
        return np.column_stack([xy, z])
    v = rng.normal(size=(cfg.n_points_3d, 3))
    v /= np.linalg.norm(v, axis=1)[:, None]
    return v * cfg.cloud_radius * rng.uniform(size=(cfg.n_points_3d, 1)) ** (1 / 3)


def _project(cam: CameraModel, R, C, X, min_depth):
    Xc = (X - C) @ R.T
    z = Xc[:, 2]
    front = z > min_depth
    rays = np.where(front[:, None], Xc[:, :2] / np.where(front, z, 1.0)[:, None], np.nan)
    pix = cam.project(rays)
    f = cam.frame
    vis = front & np.all(np.isfinite(pix), axis=1)
    vis &= (pix[:, 0] >= 0) & (pix[:, 0] <= f.width - 1) & (pix[:, 1] >= 0) & (pix[:, 1] <= f.height - 1)
    return pix, vis


def fundamental_from_poses(cam_a: CameraModel, Ra, Ca, cam_b: CameraModel, Rb, Cb) -> FundamentalMatrix:
    """F mapping normalized points of image a to epipolar lines in image b."""
    R = Rb @ Ra.T
    t = Rb @ (Ca - Cb)
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    E = tx @ R
    Ka_inv = np.diag([1 / cam_a.focal_scale, 1 / cam_a.focal_scale, 1.0])
    Kb_inv = np.diag([1 / cam_b.focal_scale, 1 / cam_b.focal_scale, 1.0])
    return FundamentalMatrix.from_matrix(Kb_inv.T @ E @ Ka_inv)


def generate(cfg: SceneConfig = SceneConfig()):
    """Sample a scene and return ``(correspondence sets, GroundTruth)``."""
    rng = np.random.default_rng(cfg.seed)
    cam_ids = cfg.cameras_for_images()
    cameras = {}
    for cid in sorted(set(cam_ids)):
        model = DivisionModel(cfg.gt_models[cid])
        pp = cfg.principal_points.get(cid, (cfg.width / 2.0, cfg.height / 2.0))
        frame = ImageFrame(cfg.width, cfg.height, pp)
        R = frame.max_radius()
        if not model.is_valid(R) or model.monotone_radius(R) < R:
            raise ValueError(f"ground-truth model of {cid} is not invertible on the frame")
        cameras[cid] = CameraModel(model, frame, cfg.focal_scale)

    poses = _poses(cfg, rng)
    X = _points(cfg, rng)
    image_ids = [f"img{i:03d}" for i in range(cfg.n_images)]
    proj = [_project(cameras[cam_ids[i]], *poses[i], X, cfg.min_depth) for i in range(cfg.n_images)]

    sets, fundamentals, labels = [], {}, {}
    for i, j in combinations(range(cfg.n_images), 2):
        (pa, va), (pb, vb) = proj[i], proj[j]
        both = np.flatnonzero(va & vb)
        if both.size < 9:
            continue
        take = rng.choice(both, min(cfg.matches_per_pair, both.size), replace=False)
        a = pa[take].copy()
        b = pb[take].copy()
        ca, cb = cameras[cam_ids[i]], cameras[cam_ids[j]]
        if cfg.noise_sigma > 0:
            a += rng.normal(scale=cfg.noise_sigma, size=a.shape)
            b += rng.normal(scale=cfg.noise_sigma, size=b.shape)
        n = take.size
        inlier = np.ones(n, bool)
        n_out = int(round(cfg.outlier_fraction * n))
        if n_out:
            out = rng.choice(n, n_out, replace=False)
            inlier[out] = False
            b[out] = rng.uniform((0, 0), (cb.frame.width - 1, cb.frame.height - 1), (n_out, 2))
        a = np.clip(a, 0, (ca.frame.width - 1, ca.frame.height - 1))
        b = np.clip(b, 0, (cb.frame.width - 1, cb.frame.height - 1))
        key = (image_ids[i], image_ids[j])
        sets.append(CorrespondenceSet(cam_ids[i], cam_ids[j], a, b, ca.frame, cb.frame, *key))
        fundamentals[key] = fundamental_from_poses(ca, *poses[i], cb, *poses[j])
        labels[key] = inlier
    gt = GroundTruth(cameras, dict(zip(image_ids, cam_ids)), fundamentals, labels)
    return sets, gt
