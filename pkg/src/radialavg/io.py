"""File formats: match lists, camera models, ground truth and binary PNM images.

Floats are written with ``repr`` (shortest round-tripping form), so every
format survives write -> read -> write byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import CameraModel, CorrespondenceSet, DivisionModel, FundamentalMatrix, ImageFrame

MATCH_MAGIC = "radialavg-matches"
MATCH_VERSION = 1
CAMERA_FORMAT = "radialavg-camera"
COORD_SLACK = 0.1


class FormatError(ValueError):
    """Malformed or inconsistent input file."""


def _f(x) -> str:
    return repr(float(x))


@dataclass(frozen=True)
class ImageRecord:
    camera_id: str
    width: int
    height: int
    principal_point: tuple[float, float]

    def frame(self) -> ImageFrame:
        return ImageFrame(self.width, self.height, self.principal_point)


@dataclass(eq=False)
class MatchFile:
    images: dict[str, ImageRecord]
    pairs: list[tuple[str, str, np.ndarray]]
    version: int = MATCH_VERSION

    def __post_init__(self):
        for a, b, m in self.pairs:
            for i in (a, b):
                if i not in self.images:
                    raise FormatError(f"pair {a}-{b} references undeclared image {i}")
            m = np.asarray(m)
            if m.ndim != 2 or m.shape[1] != 4:
                raise FormatError(f"pair {a}-{b}: matches must be an (n, 4) array")
            for cols, i in (((0, 1), a), ((2, 3), b)):
                rec = self.images[i]
                lo = -COORD_SLACK * np.array([rec.width, rec.height])
                hi = (1 + COORD_SLACK) * np.array([rec.width, rec.height])
                xy = m[:, cols]
                if not np.all(np.isfinite(xy)) or np.any(xy < lo) or np.any(xy > hi):
                    raise FormatError(f"pair {a}-{b}: coordinates outside image {i}")

    @classmethod
    def from_sets(cls, sets: list[CorrespondenceSet]) -> "MatchFile":
        images = {}
        pairs = []
        for s in sets:
            for iid, cid, fr in ((s.image_id_a, s.camera_id_a, s.frame_a), (s.image_id_b, s.camera_id_b, s.frame_b)):
                rec = ImageRecord(cid, int(fr.width), int(fr.height), tuple(map(float, fr.principal_point)))
                if images.setdefault(iid, rec) != rec:
                    raise FormatError(f"image {iid} declared twice with different metadata")
            pairs.append((s.image_id_a, s.image_id_b, np.hstack([s.points_a, s.points_b])))
        return cls(dict(sorted(images.items())), pairs)

    def to_sets(self) -> list[CorrespondenceSet]:
        out = []
        for a, b, m in self.pairs:
            ra, rb = self.images[a], self.images[b]
            out.append(CorrespondenceSet(ra.camera_id, rb.camera_id, m[:, :2].copy(), m[:, 2:].copy(),
                                         ra.frame(), rb.frame(), a, b))
        return out

    def dumps(self) -> str:
        lines = [f"{MATCH_MAGIC} {self.version}", f"images {len(self.images)}"]
        for iid, r in self.images.items():
            lines.append(f"{iid} {r.camera_id} {r.width} {r.height} "
                         f"{_f(r.principal_point[0])} {_f(r.principal_point[1])}")
        lines.append(f"pairs {len(self.pairs)}")
        for a, b, m in self.pairs:
            lines.append(f"pair {a} {b} {m.shape[0]}")
            lines.extend(" ".join(_f(v) for v in row) for row in m)
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MatchFile":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        pos = 0

        def take(n_fields=None, keyword=None):
            nonlocal pos
            if pos >= len(lines):
                raise FormatError("unexpected end of match file")
            tok = lines[pos].split()
            pos += 1
            if keyword is not None and tok[0] != keyword:
                raise FormatError(f"expected '{keyword}', got '{tok[0]}'")
            if n_fields is not None and len(tok) != n_fields:
                raise FormatError(f"line {pos}: expected {n_fields} fields, got {len(tok)}")
            return tok

        try:
            head = take(2, MATCH_MAGIC)
            version = int(head[1])
            if version != MATCH_VERSION:
                raise FormatError(f"unsupported match file version {version}")
            n_img = int(take(2, "images")[1])
            images = {}
            for _ in range(n_img):
                iid, cid, w, h, cx, cy = take(6)
                if iid in images:
                    raise FormatError(f"image {iid} declared twice")
                images[iid] = ImageRecord(cid, int(w), int(h), (float(cx), float(cy)))
            n_pairs = int(take(2, "pairs")[1])
            pairs = []
            for _ in range(n_pairs):
                _, a, b, n = take(4, "pair")
                rows = [take(4) for _ in range(int(n))]
                m = np.array(rows, dtype=float).reshape(int(n), 4)
                pairs.append((a, b, m))
        except (ValueError, IndexError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed match file: {exc}") from exc
        if pos != len(lines):
            raise FormatError("trailing content after last pair")
        return cls(images, pairs, version)

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "MatchFile":
        return cls.loads(Path(path).read_text())


@dataclass(eq=False)
class CameraModelFile:
    camera_id: str
    coeffs: tuple[float, ...]
    principal_point: tuple[float, float]
    frame_size: tuple[int, int]
    focal_scale: float = 1.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = tuple(float(c) for c in self.coeffs)
        self.principal_point = (float(self.principal_point[0]), float(self.principal_point[1]))
        self.frame_size = (int(self.frame_size[0]), int(self.frame_size[1]))
        try:
            self.model = DivisionModel(self.coeffs)
            self.frame = ImageFrame(*self.frame_size, self.principal_point)
        except ValueError as exc:
            raise FormatError(f"camera {self.camera_id}: {exc}") from exc

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def camera_model(self) -> CameraModel:
        return CameraModel(self.model, self.frame, self.focal_scale)

    @classmethod
    def from_camera(cls, camera_id: str, cam: CameraModel, provenance: dict | None = None) -> "CameraModelFile":
        return cls(camera_id, tuple(cam.model.coeffs), cam.frame.principal_point,
                   (cam.frame.width, cam.frame.height), cam.focal_scale, provenance or {})

    def to_dict(self) -> dict:
        return {
            "format": CAMERA_FORMAT,
            "version": 1,
            "camera_id": self.camera_id,
            "degree": self.degree,
            "coeffs": list(self.coeffs),
            "principal_point": list(self.principal_point),
            "frame": list(self.frame_size),
            "normalization": "diagonal",
            "focal_scale": float(self.focal_scale),
            "provenance": self.provenance,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CameraModelFile":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"camera file is not valid JSON: {exc}") from exc
        if d.get("format") != CAMERA_FORMAT:
            raise FormatError("not a camera model file")
        if d.get("normalization") != "diagonal":
            raise FormatError(f"unsupported normalization {d.get('normalization')!r}")
        try:
            out = cls(d["camera_id"], d["coeffs"], d["principal_point"], d["frame"],
                      d.get("focal_scale", 1.0), d.get("provenance", {}))
        except (KeyError, TypeError, IndexError) as exc:
            raise FormatError(f"camera file is missing a field: {exc}") from exc
        if out.degree != d.get("degree", out.degree):
            raise FormatError("degree does not match the number of coefficients")
        return out

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def read(cls, path) -> "CameraModelFile":
        return cls.loads(Path(path).read_text())


def camera_filename(camera_id: str) -> str:
    return f"camera_{camera_id}.json"


def ground_truth_dumps(gt) -> str:
    d = {
        "images": dict(sorted(gt.image_cameras.items())),
        "pairs": [
            {"image_a": a, "image_b": b, "F": [float(v) for v in gt.fundamentals[(a, b)].matrix.ravel()],
             "inliers": "".join("1" if x else "0" for x in gt.inlier_labels[(a, b)])}
            for a, b in sorted(gt.fundamentals)
        ],
    }
    return json.dumps(d, indent=2, sort_keys=True) + "\n"


def write_ground_truth(directory, gt) -> None:
    """Per-camera model files plus ``ground_truth.json`` with F and inlier labels."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for cid, cam in sorted(gt.cameras.items()):
        CameraModelFile.from_camera(cid, cam, {"stage": "ground_truth"}).write(out / camera_filename(cid))
    (out / "ground_truth.json").write_text(ground_truth_dumps(gt))


def read_ground_truth(directory):
    from .synth import GroundTruth

    d = Path(directory)
    try:
        meta = json.loads((d / "ground_truth.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read ground truth in {d}: {exc}") from exc
    cameras = {cid: CameraModelFile.read(d / camera_filename(cid)).camera_model()
               for cid in sorted(set(meta["images"].values()))}
    fundamentals, labels = {}, {}
    for p in meta["pairs"]:
        key = (p["image_a"], p["image_b"])
        fundamentals[key] = FundamentalMatrix.from_matrix(np.array(p["F"], float).reshape(3, 3))
        labels[key] = np.array([c == "1" for c in p["inliers"]], bool)
    return GroundTruth(cameras, dict(meta["images"]), fundamentals, labels)


def _pnm_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6); returns ``(H, W)`` or ``(H, W, 3)`` uint8/uint16."""
    data = Path(path).read_bytes()
    tokens, pos = _pnm_tokens(data, 4)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError("only binary PGM (P5) and PPM (P6) images are supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if not 0 < maxval < 65536:
        raise FormatError(f"invalid PNM maxval {maxval}")
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * channels
    if len(data) - pos < n * dtype.itemsize:
        raise FormatError("truncated PNM pixel data")
    arr = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(
        np.uint16 if maxval > 255 else np.uint8)
    return arr.reshape((h, w, 3) if channels == 3 else (h, w))


def write_pnm(path, image) -> None:
    img = np.asarray(image)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError("image must be (H, W) or (H, W, 3)")
    wide = img.dtype == np.uint16
    if not wide and img.dtype != np.uint8:
        raise ValueError("image dtype must be uint8 or uint16")
    maxval = 65535 if wide else 255
    h, w = img.shape[:2]
    body = img.astype(">u2").tobytes() if wide else img.tobytes()
    Path(path).write_bytes(b"%s\n%d %d\n%d\n" % (magic, w, h, maxval) + body)
