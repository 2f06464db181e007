"""Command-line interface: ``radialavg {synth,calibrate,eval,undistort}``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .geometry import CameraModel, ModelValidityError
from .io import (CameraModelFile, FormatError, MatchFile, camera_filename, read_ground_truth, read_pnm,
                 write_ground_truth, write_pnm)
from .joint import GlobalRefinementError
from .metrics import align_focal_small_angle, focal_adjusted_re, reprojection_error
from .pipeline import STAGES, CalibrationError, PipelineConfig, calibrate, stage_fa_re
from .rectify import apply_remap, pinhole_remap
from .synth import DEFAULT_MODEL, SceneConfig, generate

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("radialavg")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="radialavg", description="Radial distortion self-calibration from image matches.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic scene")
    s.add_argument("--out-dir", required=True, type=Path)
    s.add_argument("--n-images", type=int, default=10)
    s.add_argument("--matches", type=_positive(int), default=300, help="matches per pair")
    s.add_argument("--noise", type=float, default=1.0, help="pixel noise sigma")
    s.add_argument("--outliers", type=float, default=0.3, help="outlier fraction")
    s.add_argument("--model", type=_floats, default=DEFAULT_MODEL, help="coefficients theta_0..theta_k")
    s.add_argument("--focal-scale", type=_positive(float), default=0.6)
    s.add_argument("--width", type=_positive(int), default=512)
    s.add_argument("--height", type=_positive(int), default=512)
    s.add_argument("--motion", choices=("orbit", "forward"), default="orbit")
    s.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("calibrate", help="estimate one distortion model per camera")
    c.add_argument("matches", type=Path)
    c.add_argument("--out-dir", required=True, type=Path)
    c.add_argument("--degree", type=int, default=4)
    c.add_argument("--threshold-px", type=_positive(float), default=2.0)
    c.add_argument("--reg-weight", type=float, default=1e-3, help="regularizer weight per inlier")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--jobs", type=_positive(int), default=1)
    c.add_argument("--optimize-centers", action="store_true")
    c.add_argument("--outer-rounds", type=_positive(int), default=3)
    c.add_argument("--gt-dir", type=Path, help="ground truth directory; adds FA-RE per stage to the report")

    e = sub.add_parser("eval", help="compare an estimated camera file against ground truth")
    e.add_argument("estimate", type=Path)
    e.add_argument("ground_truth", type=Path)
    e.add_argument("--out", type=Path, help="metrics CSV (default: stdout)")
    e.add_argument("--dense", action="store_true", help="evaluate every pixel instead of a 64x64 grid")

    u = sub.add_parser("undistort", help="pinhole remap grid and optional image resampling")
    u.add_argument("model", type=Path)
    u.add_argument("--grid", type=Path, help="write the remap grid CSV here")
    u.add_argument("--image", type=Path, help="PGM/PPM input image")
    u.add_argument("--output", type=Path, help="undistorted image path")
    u.add_argument("--focal", type=_positive(float), help="target focal length in pixels")
    return p


def cmd_synth(args) -> int:
    cfg = SceneConfig(n_images=args.n_images, gt_models={"cam0": tuple(args.model)}, focal_scale=args.focal_scale,
                      width=args.width, height=args.height, motion=args.motion,
                      matches_per_pair=args.matches, noise_sigma=args.noise, outlier_fraction=args.outliers,
                      seed=args.seed)
    sets, gt = generate(cfg)
    if not sets:
        raise CalibrationError("scene produced no overlapping image pairs")
    args.out_dir.mkdir(parents=True, exist_ok=True)
    MatchFile.from_sets(sets).write(args.out_dir / "matches.txt")
    write_ground_truth(args.out_dir / "gt", gt)
    print(f"wrote {len(sets)} pairs to {args.out_dir / 'matches.txt'}")
    return EXIT_OK


def _report_rows(result, fa):
    rows = []
    for stage in STAGES:
        rows.append({"kind": "stage", "id": stage, "stage": stage, "cost_px2": result.stage_costs[stage]})
    for pr in result.pairs:
        ref = pr.refined
        rows.append({"kind": "pair", "id": f"{pr.corr.image_id_a}-{pr.corr.image_id_b}", "stage": "refined",
                     "cost_px2": ref.cost, "n_inliers": pr.init.n_inliers, "n_matches": len(pr.corr),
                     "weight_a": ref.coverage_a, "weight_b": ref.coverage_b,
                     "flags": ";".join(([] if not pr.init.rejected else ["rejected"])
                                       + (["degenerate"] if pr.degenerate else []) + list(ref.warnings))})
    for cid, cam in sorted(result.cameras.items()):
        row = {"kind": "camera", "id": cid, "stage": "global", "n_inliers": cam.n_inliers,
               "n_pairs": cam.n_pairs, "flags": ";".join((["low_confidence"] if cam.low_confidence else [])
                                                        + cam.notes)}
        if fa is not None:
            for stage in STAGES:
                row[f"fa_re_{stage}_px"] = fa[cid][stage]
        rows.append(row)
    return rows


def _write_report(out_dir: Path, result, fa) -> None:
    rows = _report_rows(result, fa)
    fields = ["kind", "id", "stage", "cost_px2", "n_inliers", "n_matches", "n_pairs", "weight_a", "weight_b"]
    if fa is not None:
        fields += [f"fa_re_{s}_px" for s in STAGES]
    fields.append("flags")
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    lines = ["stage costs (sum of squared Sampson errors on RANSAC inliers, px^2):"]
    lines += [f"  {s:<9} {result.stage_costs[s]:.6g}" for s in STAGES]
    if not result.cost_monotone:
        lines.append("  note: stage costs are not monotone (averaged models are not fit per pair)")
    n_rej = sum(pr.init.rejected for pr in result.pairs)
    lines.append(f"pairs: {len(result.pairs)} total, {n_rej} rejected")
    for cid, cam in sorted(result.cameras.items()):
        lines.append(f"camera {cid}: degree {cam.model.degree}, {cam.n_pairs} pair models, "
                     f"{cam.n_inliers} final inliers" + (", LOW CONFIDENCE" if cam.low_confidence else ""))
        lines += [f"  note: {n}" for n in cam.notes]
        if fa is not None:
            lines.append("  FA-RE px: " + ", ".join(f"{s}={fa[cid][s]:.4g}" for s in STAGES))
    for h in result.global_history:
        lines.append(f"global round {h['round']} {h['pass']}: {h['initial_cost']:.6g} -> {h['cost']:.6g} "
                     f"({h['iterations']} iterations, {h['status']})")
    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")


def cmd_calibrate(args) -> int:
    if args.degree < 2:
        raise _UsageError("--degree must be >= 2")
    if args.reg_weight < 0:
        raise _UsageError("--reg-weight must be >= 0")
    mf = MatchFile.read(args.matches)
    cfg = PipelineConfig(degree=args.degree, threshold_px=args.threshold_px, reg_per_inlier=args.reg_weight,
                         seed=args.seed, jobs=args.jobs, optimize_centers=args.optimize_centers,
                         outer_rounds=args.outer_rounds)
    result = calibrate(mf.to_sets(), cfg)
    fa = None
    if args.gt_dir is not None:
        fa = stage_fa_re(result, read_ground_truth(args.gt_dir).cameras)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    for cid, cam in sorted(result.cameras.items()):
        prov = {
            "stage": "global",
            "stage_costs_px2": {s: result.stage_costs[s] for s in STAGES},
            "n_pairs": cam.n_pairs,
            "n_inliers": cam.n_inliers,
            "low_confidence": cam.low_confidence,
            "notes": list(cam.notes),
            "seed": args.seed,
        }
        frame = mf.images[next(i for i, r in mf.images.items() if r.camera_id == cid)].frame()
        cm = CameraModel(cam.model, frame.with_principal_point(cam.principal_point))
        CameraModelFile.from_camera(cid, cm, prov).write(args.out_dir / camera_filename(cid))
        if cam.low_confidence:
            log.warning("camera %s: low confidence (%s)", cid, "; ".join(cam.notes))
    _write_report(args.out_dir, result, fa)
    print((args.out_dir / "report.txt").read_text(), end="")
    return EXIT_OK


def evaluate(est: CameraModelFile, gt: CameraModelFile, dense: bool = False) -> dict:
    e, g = est.camera_model(), gt.camera_model()
    if (e.frame.width, e.frame.height) != (g.frame.width, g.frame.height):
        raise FormatError("estimate and ground truth have different frame sizes")
    if not g.model.is_valid(g.frame.max_radius()):
        raise ModelValidityError(f"ground truth for {gt.camera_id} has h(r) <= 0 inside its frame")
    fa, s = focal_adjusted_re(e, g, dense=dense, return_scale=True)
    return {
        "camera_id": est.camera_id,
        "re_px": reprojection_error(e, g, dense=dense),
        "fa_re_px": fa,
        "fa_focal_scale": s,
        "aligned_focal_px": align_focal_small_angle(e),
        "gt_aligned_focal_px": align_focal_small_angle(g),
    }


def cmd_eval(args) -> int:
    row = evaluate(CameraModelFile.read(args.estimate), CameraModelFile.read(args.ground_truth), args.dense)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
        w.writeheader()
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def write_grid_csv(path, grid: np.ndarray) -> None:
    H, W = grid.shape[:2]
    X, Y = np.meshgrid(np.arange(W), np.arange(H))
    table = np.column_stack([X.ravel(), Y.ravel(), grid.reshape(-1, 2)])
    np.savetxt(path, table, fmt=["%d", "%d", "%.17g", "%.17g"], delimiter=",",
               header="x,y,src_x,src_y", comments="")


def cmd_undistort(args) -> int:
    if args.grid is None and args.image is None:
        raise _UsageError("give --grid and/or --image")
    if args.image is not None and args.output is None:
        raise _UsageError("--image needs --output")
    cam = CameraModelFile.read(args.model).camera_model()
    grid, f = pinhole_remap(cam, args.focal)
    if args.grid is not None:
        write_grid_csv(args.grid, grid)
    if args.image is not None:
        img = read_pnm(args.image)
        if img.shape[:2] != grid.shape[:2]:
            raise FormatError(f"image is {img.shape[1]}x{img.shape[0]}, model frame is "
                              f"{grid.shape[1]}x{grid.shape[0]}")
        write_pnm(args.output, apply_remap(img, grid))
    print(f"pinhole focal {f!r} px, {int(np.count_nonzero(grid[..., 0] < 0))} invalid pixels")
    return EXIT_OK


class _UsageError(Exception):
    pass


COMMANDS = {"synth": cmd_synth, "calibrate": cmd_calibrate, "eval": cmd_eval, "undistort": cmd_undistort}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"radialavg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ModelValidityError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"radialavg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, CalibrationError, GlobalRefinementError, OSError, KeyError, ValueError) as exc:
        print(f"radialavg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
