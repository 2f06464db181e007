import math

import numpy as np
import pytest
from scipy.optimize import brentq

from radialavg.geometry import CameraModel, DivisionModel, ImageFrame, epipolar_residual
from radialavg.metrics import (align_focal_small_angle, evaluation_pixels, focal_adjusted_re, golden_section,
                               reprojection_error)
from radialavg.synth import SceneConfig, generate, look_at


def camera(coeffs, width=512, height=512, focal=0.6, pp=None):
    return CameraModel(DivisionModel(coeffs), ImageFrame(width, height, pp), focal)


def dense_reference(est: CameraModel, gt: CameraModel) -> float:
    """Brute-force dense RE for two co-centered cameras with equal focal scale.

    Both maps are radial, so every pixel at normalized radius ``r`` lands at
    radius ``rho`` solving ``rho / h_est(rho) = r / h_gt(r)``; each distinct
    radius is solved by bracketed root finding.
    """
    f = gt.frame
    xs, ys = np.meshgrid(np.arange(f.width) - f.center[0], np.arange(f.height) - f.center[1])
    d2 = (xs**2 + ys**2).ravel()
    unique, counts = np.unique(d2, return_counts=True)
    r = np.sqrt(unique) / f.diag
    t = r / gt.model.h(r)
    top = est.model.monotone_radius(2.0)
    rho = np.array([brentq(lambda x, ti=ti: x / est.model.h(x) - ti, 0.0, top, xtol=1e-15) if ti > 0 else 0.0
                    for ti in t])
    return float(np.sum(np.abs(rho - r) * f.diag * counts) / counts.sum())


class TestReprojectionError:
    def test_identical_models(self):
        c = camera((1, 0, -0.6, 0, 0.2))
        assert reprojection_error(c, c) < 1e-10
        assert focal_adjusted_re(c, c) < 1e-10

    def test_focal_scaling_is_absorbed(self):
        gt = camera((1, 0, -0.2), 640, 480)
        est = gt.with_focal_scale(gt.focal_scale * 1.01)
        assert reprojection_error(est, gt) > 0.1
        assert focal_adjusted_re(est, gt) < 1e-6

    @pytest.mark.parametrize("f0", [0.5, 2.0])
    def test_pre_scaled_focal(self, f0):
        gt = camera((1, 0, -0.6, 0, 0.2))
        est = gt.with_focal_scale(gt.focal_scale * f0)
        value, scale = focal_adjusted_re(est, gt, return_scale=True)
        assert value < 1e-8
        assert scale == pytest.approx(1 / f0, rel=1e-8)

    def test_dense_matches_brute_force(self):
        est, gt = camera((1, 0, -0.2)), camera((1, 0, -0.25))
        assert abs(reprojection_error(est, gt, dense=True) - dense_reference(est, gt)) < 1e-8

    def test_grid_is_close_to_dense(self):
        est, gt = camera((1, 0, -0.2)), camera((1, 0, -0.25))
        # the subsampled grid weights the frame border slightly more than the dense grid
        assert reprojection_error(est, gt) == pytest.approx(reprojection_error(est, gt, dense=True), rel=0.05)

    def test_fa_re_matches_focal_grid_search(self):
        # a one-parameter estimate has a closed-form radial inverse, so every
        # focal sample is evaluated exactly without root finding
        lam = -0.2
        est, gt = camera((1, 0, lam)), camera((1, 0, -0.6, 0, 0.2))
        pix = evaluation_pixels(gt.frame, 32)
        r = np.linalg.norm(gt.frame.normalize(pix), axis=1)
        t = r / gt.model.h(r)  # undistorted radius at focal scale 1 (equal focal scales)

        def grid_re(scales):
            T = np.outer(scales, t)
            disc = 1 - 4 * lam * T**2
            rho = np.where(T > 0, (1 - np.sqrt(np.abs(disc))) / (2 * lam * np.where(T > 0, T, 1)), 0.0)
            err = np.abs(rho - r) * gt.frame.diag
            err[np.broadcast_to(disc < 0, err.shape)] = np.nan
            return np.nanmean(err, axis=1)

        coarse = np.exp(np.linspace(math.log(0.1), math.log(10.0), 100_000))
        s0 = coarse[np.argmin(grid_re(coarse))]
        fine = np.linspace(s0 * 0.999, s0 * 1.001, 100_000)
        best = np.min(grid_re(fine))
        assert abs(focal_adjusted_re(est, gt, pixels=pix) - best) < 1e-6

    def test_fa_re_never_exceeds_re(self, rng):
        gt = camera((1, 0, -0.6, 0, 0.2))
        for _ in range(5):
            est = camera((1, 0, *rng.uniform(-0.4, 0.1, 3)), focal=rng.uniform(0.4, 0.8))
            assert 0 <= focal_adjusted_re(est, gt) <= reprojection_error(est, gt)

    def test_frame_mismatch(self):
        with pytest.raises(ValueError):
            reprojection_error(camera((1, 0, 0), 512, 512), camera((1, 0, 0), 640, 480))

    def test_golden_section_on_parabola(self):
        x, fx = golden_section(lambda t: (t - 0.3) ** 2, -1.0, 2.0, 1e-12)
        assert x == pytest.approx(0.3, abs=1e-6) and fx < 1e-12


class TestAlignFocal:
    def test_pinhole(self):
        cam = camera((1, 0, 0), 640, 480, focal=0.5)
        assert align_focal_small_angle(cam) == pytest.approx(400.0, rel=1e-3)

    def test_converged_in_displacement(self):
        cam = camera((1, 0, -0.2))
        dx = cam.frame.diag / 1000
        assert align_focal_small_angle(cam, dx / 2) == pytest.approx(align_focal_small_angle(cam, dx), rel=1e-4)

    def test_against_fine_angular_resolution(self):
        cam = camera((1, 0, -0.2))
        dx = cam.frame.diag / 1e6
        r = dx / cam.frame.diag
        angle = math.atan((r / (1 - 0.2 * r * r)) / cam.focal_scale)
        assert align_focal_small_angle(cam) == pytest.approx(dx / angle, rel=1e-3)


class TestGenerate:
    def test_noise_free_inliers_satisfy_ground_truth(self):
        sets, gt = generate(SceneConfig(seed=2))
        m = gt.cameras["cam0"].model
        assert len(sets) == 45
        for s in sets:
            p, q = s.normalized()
            F = gt.fundamentals[(s.image_id_a, s.image_id_b)]
            assert np.max(np.abs(epipolar_residual(p, q, F, m, m))) < 1e-10

    def test_distortion_round_trip(self, rng):
        m = DivisionModel((1, 0, -0.6, 0, 0.2))
        R = ImageFrame(512, 512).max_radius()
        r = rng.uniform(0, R, 10_000)
        t = m.radial_undistort(r)
        assert np.max(np.abs(m.radial_distort(t, m.monotone_radius(R)) - r)) < 1e-10

    def test_outlier_share(self):
        sets, gt = generate(SceneConfig(outlier_fraction=0.3, noise_sigma=1.0, seed=3))
        labels = np.concatenate([gt.inlier_labels[(s.image_id_a, s.image_id_b)] for s in sets])
        assert abs((~labels).mean() - 0.3) <= 0.02

    def test_outliers_break_the_epipolar_constraint(self):
        sets, gt = generate(SceneConfig(n_images=3, outlier_fraction=0.3, seed=1))
        m = gt.cameras["cam0"].model
        s = sets[0]
        lab = gt.inlier_labels[(s.image_id_a, s.image_id_b)]
        p, q = s.normalized()
        e = np.abs(epipolar_residual(p, q, gt.fundamentals[(s.image_id_a, s.image_id_b)], m, m))
        assert np.max(e[lab]) < 1e-10
        assert np.median(e[~lab]) > 1e-3

    def test_deterministic(self):
        a, _ = generate(SceneConfig(n_images=3, noise_sigma=1.0, outlier_fraction=0.2, seed=9))
        b, _ = generate(SceneConfig(n_images=3, noise_sigma=1.0, outlier_fraction=0.2, seed=9))
        assert all(np.array_equal(x.points_a, y.points_a) and np.array_equal(x.points_b, y.points_b)
                   for x, y in zip(a, b))

    def test_non_invertible_model_rejected(self):
        with pytest.raises(ValueError):
            generate(SceneConfig(gt_models={"cam0": (1, 0, 5.0)}))  # U peaks at r = 0.447 < 0.5

    @pytest.mark.parametrize("kwargs", [{"n_images": 1}, {"noise_sigma": -1}, {"outlier_fraction": 1.0},
                                        {"motion": "spiral"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            SceneConfig(**kwargs)

    def test_multiple_cameras_and_principal_points(self):
        cfg = SceneConfig(n_images=4, camera_of_image=("a", "a", "b", "b"),
                          gt_models={"a": (1, 0, -0.2), "b": (1, 0, -0.4)}, principal_points={"b": (250, 270)})
        sets, gt = generate(cfg)
        assert np.array_equal(gt.cameras["b"].frame.center, [250, 270])
        assert {s.camera_id_a for s in sets} | {s.camera_id_b for s in sets} == {"a", "b"}

    def test_look_at_is_rotation(self):
        R = look_at(np.array([1.0, 0.5, -2.0]), np.zeros(3))
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-14)
        assert np.linalg.det(R) == pytest.approx(1.0)
