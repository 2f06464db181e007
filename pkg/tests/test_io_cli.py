import csv
import logging

import numpy as np
import pytest

from radialavg.cli import evaluate, main
from radialavg.geometry import CameraModel, DivisionModel, ImageFrame
from radialavg.io import (CameraModelFile, FormatError, ImageRecord, MatchFile, camera_filename, read_ground_truth,
                          read_pnm, write_pnm)
from radialavg.metrics import focal_adjusted_re, reprojection_error
from radialavg.pipeline import PipelineConfig, calibrate
from radialavg.rectify import apply_remap, pinhole_remap
from radialavg.synth import SceneConfig, generate


def run(*argv):
    return main([str(a) for a in argv])


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def camera_file(coeffs, width=512, height=512, pp=None, focal=0.6, cid="cam0"):
    return CameraModelFile.from_camera(cid, CameraModel(DivisionModel(coeffs), ImageFrame(width, height, pp), focal))


class _Collect(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.records = []

    def emit(self, record):
        self.records.append(record)


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    """Default synth + calibrate; returns the directory and the warnings calibrate logged."""
    root = tmp_path_factory.mktemp("default")
    assert run("synth", "--out-dir", root / "scene") == 0
    handler = _Collect()
    logger = logging.getLogger("radialavg")
    logger.addHandler(handler)
    try:
        assert run("calibrate", root / "scene" / "matches.txt", "--out-dir", root / "out",
                   "--gt-dir", root / "scene" / "gt") == 0
    finally:
        logger.removeHandler(handler)
    return root, handler.records


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    assert run("synth", "--out-dir", root, "--n-images", 4, "--seed", 3) == 0
    return root / "matches.txt"


class TestMatchFile:
    def test_round_trip_is_byte_identical(self, tmp_path):
        sets, _ = generate(SceneConfig(n_images=3, noise_sigma=0.7, seed=4))
        text = MatchFile.from_sets(sets).dumps()
        (tmp_path / "m.txt").write_text(text)
        again = MatchFile.read(tmp_path / "m.txt")
        assert again.dumps() == text
        for s, t in zip(sets, again.to_sets()):
            assert np.array_equal(s.points_a, t.points_a) and np.array_equal(s.points_b, t.points_b)

    def test_undeclared_image(self):
        text = "radialavg-matches 1\nimages 1\nim0 c 10 10 5.0 5.0\npairs 1\npair im0 im1 1\n1 1 1 1\n"
        with pytest.raises(FormatError, match="undeclared"):
            MatchFile.loads(text)

    def test_coordinates_outside_slack(self):
        text = ("radialavg-matches 1\nimages 2\nim0 c 10 10 5.0 5.0\nim1 c 10 10 5.0 5.0\n"
                "pairs 1\npair im0 im1 1\n1 1 12 1\n")
        with pytest.raises(FormatError, match="outside"):
            MatchFile.loads(text)

    @pytest.mark.parametrize("text", ["", "radialavg-matches 2\n", "radialavg-matches 1\nimages x\n",
                                      "radialavg-matches 1\nimages 0\npairs 0\nextra\n"])
    def test_malformed(self, text):
        with pytest.raises(FormatError):
            MatchFile.loads(text)


class TestCameraModelFile:
    def test_round_trip_is_byte_identical(self, tmp_path):
        f = camera_file((1, 0, -0.6, 0.01, 0.2), 640, 480, (321.5, 239.25), 0.55)
        f.provenance = {"stage": "global", "costs": [1.5, 0.1]}
        f.write(tmp_path / "c.json")
        g = CameraModelFile.read(tmp_path / "c.json")
        assert g.dumps() == f.dumps()
        assert g.model.coeffs.tobytes() == f.model.coeffs.tobytes()

    def test_invalid_model_is_rejected(self):
        text = camera_file((1, 0, -0.2)).dumps().replace('"coeffs": [\n    1.0,', '"coeffs": [\n    2.0,')
        with pytest.raises(FormatError):
            CameraModelFile.loads(text)

    def test_wrong_format_tag(self):
        with pytest.raises(FormatError):
            CameraModelFile.loads('{"format": "other"}')


class TestPnm:
    @pytest.mark.parametrize("shape,dtype", [((7, 5), np.uint8), ((4, 6, 3), np.uint8), ((3, 3), np.uint16)])
    def test_round_trip(self, tmp_path, rng, shape, dtype):
        img = rng.integers(0, np.iinfo(dtype).max, shape).astype(dtype)
        write_pnm(tmp_path / "a.pnm", img)
        back = read_pnm(tmp_path / "a.pnm")
        assert back.dtype == dtype and np.array_equal(back, img)
        write_pnm(tmp_path / "b.pnm", back)
        assert (tmp_path / "a.pnm").read_bytes() == (tmp_path / "b.pnm").read_bytes()

    def test_comment_in_header(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
        assert read_pnm(tmp_path / "c.pgm").tolist() == [[1, 2]]

    def test_ascii_pnm_is_rejected(self, tmp_path):
        (tmp_path / "a.pgm").write_bytes(b"P2\n1 1\n255\n7\n")
        with pytest.raises(FormatError):
            read_pnm(tmp_path / "a.pgm")

    def test_truncated(self, tmp_path):
        (tmp_path / "t.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
        with pytest.raises(FormatError):
            read_pnm(tmp_path / "t.pgm")


class TestSynthCommand:
    def test_default_scene_is_accepted_without_warnings(self, default_run):
        root, warnings = default_run
        assert len(MatchFile.read(root / "scene" / "matches.txt").pairs) == 45
        assert [r.getMessage() for r in warnings] == []
        assert "LOW CONFIDENCE" not in (root / "out" / "report.txt").read_text()

    def test_two_images_give_one_pair(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path, "--n-images", 2) == 0
        mf = MatchFile.read(tmp_path / "matches.txt")
        assert len(mf.pairs) == 1 and len(mf.images) == 2

    def test_ground_truth_round_trip(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path, "--n-images", 3, "--seed", 5) == 0
        gt = read_ground_truth(tmp_path / "gt")
        _, ref = generate(SceneConfig(n_images=3, seed=5, noise_sigma=1.0, outlier_fraction=0.3))
        assert np.array_equal(gt.cameras["cam0"].model.coeffs, ref.cameras["cam0"].model.coeffs)
        for key, lab in ref.inlier_labels.items():
            assert np.array_equal(gt.inlier_labels[key], lab)


class TestCalibrateCommand:
    def test_default_scene_fa_re(self, default_run):
        root, _ = default_run
        rows = read_csv(root / "out" / "report.csv")
        cam = next(r for r in rows if r["kind"] == "camera")
        assert float(cam["fa_re_global_px"]) < 0.5
        assert (root / "out" / camera_filename("cam0")).exists()

    def test_eval_matches_library(self, default_run, tmp_path):
        root, _ = default_run
        est = root / "out" / camera_filename("cam0")
        gt = root / "scene" / "gt" / camera_filename("cam0")
        assert run("eval", est, gt, "--out", tmp_path / "m.csv") == 0
        row = read_csv(tmp_path / "m.csv")[0]
        e, g = CameraModelFile.read(est).camera_model(), CameraModelFile.read(gt).camera_model()
        assert float(row["fa_re_px"]) == focal_adjusted_re(e, g)
        assert float(row["re_px"]) == reprojection_error(e, g)
        assert float(row["fa_re_px"]) < 0.5

    def test_noise_free(self, tmp_path):
        assert run("synth", "--out-dir", tmp_path / "s", "--noise", 0, "--outliers", 0) == 0
        assert run("calibrate", tmp_path / "s" / "matches.txt", "--out-dir", tmp_path / "o") == 0
        assert run("eval", tmp_path / "o" / camera_filename("cam0"), tmp_path / "s" / "gt" / camera_filename("cam0"),
                   "--out", tmp_path / "m.csv") == 0
        assert float(read_csv(tmp_path / "m.csv")[0]["fa_re_px"]) < 1e-3

    def test_single_pair_of_two_cameras(self, tmp_path):
        # each camera receives exactly one pair model, so averaging must hand it through unchanged
        cfg = SceneConfig(n_images=2, camera_of_image=("a", "b"), gt_models={"a": (1, 0, -0.3), "b": (1, 0, -0.1)},
                          orbit_spread_deg=60, seed=1)
        sets, _ = generate(cfg)
        MatchFile.from_sets(sets).write(tmp_path / "m.txt")
        result = calibrate(MatchFile.read(tmp_path / "m.txt").to_sets(), PipelineConfig())
        pair = result.pairs[0].refined
        for cid, model in (("a", pair.model_a), ("b", pair.model_b)):
            cam = result.cameras[cid]
            assert cam.n_pairs == 1
            assert np.max(np.abs(cam.stage_models["averaged"].coeffs - model.coeffs)) < 1e-8
        assert run("calibrate", tmp_path / "m.txt", "--out-dir", tmp_path / "o") == 0
        assert {p.name for p in (tmp_path / "o").glob("camera_*.json")} == {camera_filename("a"), camera_filename("b")}

    def test_seed_determinism(self, small_scene, tmp_path):
        outs = []
        for k in range(2):
            assert run("calibrate", small_scene, "--out-dir", tmp_path / str(k), "--seed", 7) == 0
            outs.append(tmp_path / str(k))
        for name in (camera_filename("cam0"), "report.csv", "report.txt"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_parallel_jobs_match_serial(self, small_scene, tmp_path):
        assert run("calibrate", small_scene, "--out-dir", tmp_path / "a", "--jobs", 1) == 0
        assert run("calibrate", small_scene, "--out-dir", tmp_path / "b", "--jobs", 2) == 0
        name = camera_filename("cam0")
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_report_lists_stage_costs(self, default_run):
        root, _ = default_run
        rows = read_csv(root / "out" / "report.csv")
        stages = [r["id"] for r in rows if r["kind"] == "stage"]
        assert stages == ["init", "refined", "averaged", "global"]
        assert all(float(r["cost_px2"]) > 0 for r in rows if r["kind"] == "stage")


class TestEvalCommand:
    def test_identical_files_give_zeros(self, tmp_path):
        f = camera_file((1, 0, -0.6, 0, 0.2))
        f.write(tmp_path / "a.json")
        assert run("eval", tmp_path / "a.json", tmp_path / "a.json", "--out", tmp_path / "m.csv") == 0
        row = read_csv(tmp_path / "m.csv")[0]
        assert float(row["re_px"]) < 1e-10 and float(row["fa_re_px"]) < 1e-10

    def test_scaled_focal(self):
        gt = camera_file((1, 0, -0.6, 0, 0.2))
        est = camera_file((1, 0, -0.6, 0, 0.2), focal=0.6 * 1.3)
        assert evaluate(est, gt)["fa_re_px"] < 1e-8

    def test_frame_mismatch_is_a_data_error(self, tmp_path):
        camera_file((1, 0, -0.2)).write(tmp_path / "a.json")
        camera_file((1, 0, -0.2), 640, 480).write(tmp_path / "b.json")
        assert run("eval", tmp_path / "a.json", tmp_path / "b.json") == 2


class TestUndistortCommand:
    def test_identity_model_gives_identity_grid(self, tmp_path):
        cam = camera_file((1, 0, 0), 64, 48, focal=1.0)
        cam.write(tmp_path / "id.json")
        assert run("undistort", tmp_path / "id.json", "--grid", tmp_path / "g.csv", "--focal",
                   ImageFrame(64, 48).diag) == 0
        table = np.loadtxt(tmp_path / "g.csv", delimiter=",", skiprows=1)
        assert np.max(np.abs(table[:, 2:] - table[:, :2])) < 1e-9

    def test_identity_resampling_is_idempotent(self, tmp_path, rng):
        cam = camera_file((1, 0, 0), 32, 24, focal=1.0)
        cam.write(tmp_path / "id.json")
        write_pnm(tmp_path / "in.pgm", rng.integers(0, 255, (24, 32)).astype(np.uint8))
        focal = str(ImageFrame(32, 24).diag)
        assert run("undistort", tmp_path / "id.json", "--image", tmp_path / "in.pgm", "--output", tmp_path / "1.pgm",
                   "--focal", focal) == 0
        assert run("undistort", tmp_path / "id.json", "--image", tmp_path / "1.pgm", "--output", tmp_path / "2.pgm",
                   "--focal", focal) == 0
        assert (tmp_path / "1.pgm").read_bytes() == (tmp_path / "2.pgm").read_bytes()
        assert np.array_equal(read_pnm(tmp_path / "1.pgm"), read_pnm(tmp_path / "in.pgm"))

    @pytest.mark.parametrize("pp", [None, (300.25, 240.5)])
    def test_center_pixel_maps_to_center(self, pp):
        cam = camera_file((1, 0, -0.6, 0, 0.2), 640, 480, pp).camera_model()
        grid, _ = pinhole_remap(cam)
        c = cam.frame.center
        if np.allclose(c, np.round(c)):
            src = grid[int(c[1]), int(c[0])]
            assert np.max(np.abs(src - c)) < 1e-6
        else:
            # the pinhole target shares the principal point, so the center is a fixed point of the map
            assert np.max(np.abs(cam.project(np.zeros((1, 2)))[0] - c)) < 1e-6

    def test_strong_distortion_marks_invalid_pixels(self):
        cam = camera_file((1, 0, -0.6, 0, 0.2)).camera_model()
        grid, _ = pinhole_remap(cam, focal_px=100.0)
        assert np.any(grid[..., 0] == -1.0)
        assert np.all((grid[..., 0] == -1.0) == (grid[..., 1] == -1.0))

    def test_apply_remap_keeps_color_and_dtype(self, rng):
        img = rng.integers(0, 65535, (12, 16, 3)).astype(np.uint16)
        grid, _ = pinhole_remap(camera_file((1, 0, 0), 16, 12, focal=1.0).camera_model(), ImageFrame(16, 12).diag)
        out = apply_remap(img, grid)
        assert out.dtype == np.uint16 and np.array_equal(out, img)

    def test_image_size_mismatch(self, tmp_path):
        camera_file((1, 0, 0), 32, 24).write(tmp_path / "m.json")
        write_pnm(tmp_path / "in.pgm", np.zeros((10, 10), np.uint8))
        assert run("undistort", tmp_path / "m.json", "--image", tmp_path / "in.pgm", "--output",
                   tmp_path / "o.pgm") == 2


class TestExitCodes:
    def test_usage_errors(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["calibrate"])
        assert exc.value.code == 1
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
        camera_file((1, 0, 0)).write(tmp_path / "m.json")
        assert run("undistort", tmp_path / "m.json") == 1
        assert run("calibrate", tmp_path / "none.txt", "--out-dir", tmp_path, "--degree", 1) == 1

    def test_missing_file_is_a_data_error(self, tmp_path):
        assert run("calibrate", tmp_path / "none.txt", "--out-dir", tmp_path / "o") == 2

    def test_malformed_match_file(self, tmp_path):
        (tmp_path / "m.txt").write_text("not a match file\n")
        assert run("calibrate", tmp_path / "m.txt", "--out-dir", tmp_path / "o") == 2

    def test_camera_without_surviving_pair_is_named(self, tmp_path, rng, capsys):
        rec = ImageRecord("lonely", 512, 512, (256.0, 256.0))
        junk = np.hstack([rng.uniform(0, 511, (60, 2)), rng.uniform(0, 511, (60, 2))])
        MatchFile({"a": rec, "b": rec}, [("a", "b", junk)]).write(tmp_path / "m.txt")
        assert run("calibrate", tmp_path / "m.txt", "--out-dir", tmp_path / "o") == 2
        assert "lonely" in capsys.readouterr().err

    def test_invalid_ground_truth_is_a_numerical_failure(self, tmp_path):
        camera_file((1, 0, -0.1), 64, 64).write(tmp_path / "est.json")
        camera_file((1, 0, -6.0), 64, 64).write(tmp_path / "gt.json")  # h vanishes at r = 0.41 < 0.5
        assert run("eval", tmp_path / "est.json", tmp_path / "gt.json") == 3
