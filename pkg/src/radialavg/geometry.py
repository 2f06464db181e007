"""Camera frames, the polynomial division model and fundamental matrices.

Points are handled as ``(N, 2)`` float arrays. Pixel coordinates are mapped to
normalized coordinates by subtracting the principal point and dividing by the
image diagonal; every distortion model in this package lives in those
normalized units.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.spatial.transform import Rotation

VALIDITY_GRID = 256


class ModelValidityError(ValueError):
    """Raised when a division model has a non-positive denominator."""


@dataclass(frozen=True)
class ImageFrame:
    width: float
    height: float
    principal_point: tuple[float, float] | None = None

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"invalid frame size {self.width}x{self.height}")
        if self.principal_point is None:
            object.__setattr__(self, "principal_point", (self.width / 2.0, self.height / 2.0))
        cx, cy = (float(v) for v in self.principal_point)
        object.__setattr__(self, "principal_point", (cx, cy))
        if not (0.0 <= cx <= self.width and 0.0 <= cy <= self.height):
            raise ValueError(f"principal point {self.principal_point} outside frame")

    @property
    def diag(self) -> float:
        return float(np.hypot(self.width, self.height))

    @property
    def center(self) -> np.ndarray:
        return np.array(self.principal_point, dtype=float)

    @property
    def area(self) -> float:
        return float(self.width * self.height)

    def with_principal_point(self, pp) -> "ImageFrame":
        return ImageFrame(self.width, self.height, (float(pp[0]), float(pp[1])))

    def normalize(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.center) / self.diag

    def denormalize(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) * self.diag + self.center

    def max_radius(self) -> float:
        """Largest normalized radius reached by a frame corner."""
        corners = np.array(
            [[0, 0], [self.width, 0], [0, self.height], [self.width, self.height]], dtype=float
        )
        return float(np.max(np.linalg.norm(self.normalize(corners), axis=1)))


def normalize(points, frame: ImageFrame) -> np.ndarray:
    """Map pixel coordinates to normalized coordinates of ``frame``."""
    return frame.normalize(points)


def denormalize(points, frame: ImageFrame) -> np.ndarray:
    return frame.denormalize(points)


@dataclass(frozen=True, eq=False)
class DivisionModel:
    """Division undistortion ``h(r) = sum_i coeffs[i] * r**i`` with ``h(0)=1``, ``h'(0)=0``.

    The undistorted (homogeneous) point of a normalized point ``p`` is
    ``(p, h(|p|))``, i.e. ``p / h(|p|)`` after dehomogenization.
    """

    coeffs: np.ndarray = field()

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size < 3:
            raise ValueError("division model needs degree >= 2")
        if c[0] != 1.0 or c[1] != 0.0:
            raise ValueError("division model requires coeffs[0] == 1 and coeffs[1] == 0")
        if not np.all(np.isfinite(c)):
            raise ValueError("non-finite coefficient")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def identity(cls, degree: int = 2) -> "DivisionModel":
        c = np.zeros(degree + 1)
        c[0] = 1.0
        return cls(c)

    @classmethod
    def from_free(cls, free) -> "DivisionModel":
        """Build from the optimizable coefficients ``coeffs[2:]``."""
        return cls(np.concatenate([[1.0, 0.0], np.asarray(free, dtype=float).ravel()]))

    @classmethod
    def one_parameter(cls, lam: float, degree: int = 2) -> "DivisionModel":
        c = np.zeros(degree + 1)
        c[0], c[2] = 1.0, lam
        return cls(c)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    @property
    def free(self) -> np.ndarray:
        return self.coeffs[2:].copy()

    @property
    def powers(self) -> np.ndarray:
        return np.arange(2, self.coeffs.size)

    def with_degree(self, degree: int) -> "DivisionModel":
        if degree < self.degree and np.any(self.coeffs[degree + 1:] != 0):
            raise ValueError("cannot truncate non-zero coefficients")
        c = np.zeros(degree + 1)
        n = min(degree, self.degree) + 1
        c[:n] = self.coeffs[:n]
        return DivisionModel(c)

    def h(self, r) -> np.ndarray:
        return np.polynomial.polynomial.polyval(r, self.coeffs)

    def dh(self, r) -> np.ndarray:
        return np.polynomial.polynomial.polyval(r, self.coeffs[1:] * np.arange(1, self.coeffs.size))

    def g(self, r) -> np.ndarray:
        """``h'(r) / r``, which is a polynomial since ``coeffs[1] == 0``."""
        j = self.powers
        return np.polynomial.polynomial.polyval(r, j * self.coeffs[2:])

    def dg(self, r) -> np.ndarray:
        """Derivative of :meth:`g` w.r.t. ``r``."""
        j = self.powers
        c = (j * (j - 2) * self.coeffs[2:])[1:]
        if c.size == 0:
            return np.zeros_like(np.asarray(r, dtype=float))
        return np.polynomial.polynomial.polyval(r, c)

    def distortion_factor(self, r) -> np.ndarray:
        """``d(r) = 1 / h(r)``."""
        return 1.0 / self.h(r)

    def radial_undistort(self, r) -> np.ndarray:
        """Scalar undistortion ``U(r) = r / h(r)``."""
        r = np.asarray(r, dtype=float)
        return r / self.h(r)

    def radial_undistort_derivative(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        h = self.h(r)
        return (h - r * self.dh(r)) / h**2

    def is_valid(self, radius: float, n: int = VALIDITY_GRID) -> bool:
        """``h > 0`` on ``n`` uniform radii in ``[0, radius]``."""
        return bool(np.all(self.h(np.linspace(0.0, radius, n)) > 0))

    def monotone_radius(self, cap: float, n: int = 4096) -> float:
        """Largest radius in ``[0, cap]`` up to which ``U(r) = r/h(r)`` is increasing with h > 0."""
        return _monotone_radius(self, float(cap), n)

    def _monotone_radius(self, cap: float, n: int) -> float:
        r = np.linspace(0.0, cap, n)
        ok = (self.h(r) > 0) & (self.radial_undistort_derivative(r) > 0)
        if ok.all():
            return float(cap)
        first = int(np.argmin(ok))
        if first == 0:
            return 0.0
        lo, hi = r[first - 1], r[first]
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if self.h(mid) > 0 and self.radial_undistort_derivative(mid) > 0:
                lo = mid
            else:
                hi = mid
        return float(lo)

    def radial_distort(self, t, r_max: float) -> np.ndarray:
        """Invert ``U`` on ``[0, r_max]``: radius ``rho`` with ``rho / h(rho) = t``.

        ``r_max`` must lie inside the monotone range; targets beyond
        ``U(r_max)`` come back as NaN.
        """
        t = np.asarray(t, dtype=float)
        out_of_range = (t > self.radial_undistort(r_max)) | (t < 0) | ~np.isfinite(t)
        tc = np.where(out_of_range, 0.0, t)
        grid = np.linspace(0.0, r_max, 1025)
        rho = np.interp(tc, self.radial_undistort(grid), grid)
        for _ in range(4):
            d = self.radial_undistort_derivative(rho)
            step = (self.radial_undistort(rho) - tc) / np.where(d > 0, d, 1.0)
            rho = np.clip(rho - step, 0.0, r_max)
        bad = np.abs(self.radial_undistort(rho) - tc) > 1e-15 * np.maximum(1.0, tc)
        if np.any(bad):
            rho = rho.copy() if rho.ndim else rho
            rho = np.where(bad, self._bisect(tc, r_max), rho)
        return np.where(out_of_range, np.nan, rho)

    def _bisect(self, t, r_max):
        lo = np.zeros_like(t)
        hi = np.full_like(t, r_max)
        for _ in range(64):
            mid = 0.5 * (lo + hi)
            below = self.radial_undistort(mid) < t
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def __eq__(self, other):
        return isinstance(other, DivisionModel) and np.array_equal(self.coeffs, other.coeffs)

    def __hash__(self):
        return hash(self.coeffs.tobytes())

    def __repr__(self):
        return f"DivisionModel({self.coeffs.tolist()})"


@lru_cache(maxsize=1024)
def _monotone_radius(model: DivisionModel, cap: float, n: int) -> float:
    return model._monotone_radius(cap, n)


def undistort(model: DivisionModel, points) -> np.ndarray:
    """Lift normalized points to homogeneous vectors ``(x, y, h(|p|))``."""
    p = np.asarray(points, dtype=float)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    h = model.h(np.linalg.norm(p, axis=1))
    if np.any(h <= 0):
        raise ModelValidityError("h(r) <= 0 at an input point")
    out = np.column_stack([p, h])
    return out[0] if single else out


def hat(w) -> np.ndarray:
    x, y, z = w
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(w) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(w, dtype=float)).as_matrix()


_GENERATORS = [hat(e) for e in np.eye(3)]


@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    """Rank-2 fundamental matrix stored as ``U diag(cos phi, sin phi, 0) V^T``.

    ``U`` and ``V`` are rotations; the matrix always has unit Frobenius norm.
    """

    U: np.ndarray
    V: np.ndarray
    phi: float

    @classmethod
    def from_matrix(cls, F) -> "FundamentalMatrix":
        F = np.asarray(F, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(F)) or np.linalg.norm(F) == 0:
            raise ValueError("fundamental matrix must be finite and non-zero")
        U, s, Vt = np.linalg.svd(F)
        V = Vt.T
        U = U * np.linalg.det(U)
        V = V * np.linalg.det(V)
        phi = float(np.arctan2(s[1], s[0]))
        return cls(U, V, phi).canonical()

    def canonical(self) -> "FundamentalMatrix":
        """Resolve the ``(U, V)`` vs ``(-U, -V)``-type sign so the largest entry is positive."""
        F = self.matrix
        if F.flat[np.argmax(np.abs(F))] < 0:
            return FundamentalMatrix(self.U * np.array([-1.0, -1.0, 1.0]), self.V, self.phi)
        return self

    @property
    def sigma(self) -> np.ndarray:
        return np.array([np.cos(self.phi), np.sin(self.phi), 0.0])

    @property
    def matrix(self) -> np.ndarray:
        return (self.U * self.sigma) @ self.V.T

    def retract(self, delta) -> "FundamentalMatrix":
        """Apply a local update ``(w_u[3], w_v[3], dphi)`` via the exponential map."""
        delta = np.asarray(delta, dtype=float)
        return FundamentalMatrix(
            self.U @ so3_exp(delta[:3]), self.V @ so3_exp(delta[3:6]), self.phi + float(delta[6])
        )

    def local_jacobian(self) -> np.ndarray:
        """``d vec(F) / d delta`` at ``delta = 0`` (row-major vec), shape ``(9, 7)``."""
        S = np.diag(self.sigma)
        J = np.empty((9, 7))
        for i, G in enumerate(_GENERATORS):
            J[:, i] = (self.U @ G @ S @ self.V.T).ravel()
            J[:, 3 + i] = (self.U @ S @ G.T @ self.V.T).ravel()
        dS = np.diag([-np.sin(self.phi), np.cos(self.phi), 0.0])
        J[:, 6] = (self.U @ dS @ self.V.T).ravel()
        return J

    def epipoles(self) -> tuple[np.ndarray, np.ndarray]:
        """Homogeneous epipoles ``(e_a, e_b)`` with ``F e_a = 0`` and ``e_b^T F = 0``."""
        return self.V[:, 2].copy(), self.U[:, 2].copy()

    def __repr__(self):
        return f"FundamentalMatrix({np.array2string(self.matrix, precision=4)})"


def epipolar_residual(p, q, F, model_p: DivisionModel, model_q: DivisionModel) -> np.ndarray:
    """``U_q(q)^T F U_p(p)`` for normalized correspondences ``p -> q``."""
    M = F.matrix if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    up = undistort(model_p, np.atleast_2d(p))
    uq = undistort(model_q, np.atleast_2d(q))
    res = np.einsum("ni,ij,nj->n", uq, M, up)
    return res[0] if np.ndim(p) == 1 else res


@dataclass(frozen=True, eq=False)
class CorrespondenceSet:
    """Matched pixel coordinates between image ``a`` and image ``b``."""

    camera_id_a: str
    camera_id_b: str
    points_a: np.ndarray
    points_b: np.ndarray
    frame_a: ImageFrame
    frame_b: ImageFrame
    image_id_a: str = ""
    image_id_b: str = ""

    def __post_init__(self):
        a = np.array(self.points_a, dtype=float).reshape(-1, 2)
        b = np.array(self.points_b, dtype=float).reshape(-1, 2)
        if a.shape != b.shape or a.shape[0] < 1:
            raise ValueError("correspondence set needs >= 1 pair of equal-length point arrays")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite correspondence")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "points_a", a)
        object.__setattr__(self, "points_b", b)

    def __len__(self):
        return self.points_a.shape[0]

    def normalized(self) -> tuple[np.ndarray, np.ndarray]:
        return self.frame_a.normalize(self.points_a), self.frame_b.normalize(self.points_b)

    @property
    def mean_diag(self) -> float:
        return 0.5 * (self.frame_a.diag + self.frame_b.diag)


@dataclass(frozen=True, eq=False)
class CameraModel:
    """A calibrated camera: division model, frame (with principal point) and focal scale.

    Back-projection maps a pixel to the ray direction ``(x, y, 1)`` with
    ``(x, y) = U(p) / focal_scale`` where ``p`` is the normalized pixel and
    ``U(p) = p / h(|p|)``. The pixel focal length is therefore
    ``focal_scale * frame.diag``; estimates carry ``focal_scale = 1``.
    """

    model: DivisionModel
    frame: ImageFrame
    focal_scale: float = 1.0

    def __post_init__(self):
        if not self.focal_scale > 0:
            raise ValueError("focal scale must be positive")

    def with_focal_scale(self, s: float) -> "CameraModel":
        return CameraModel(self.model, self.frame, float(s))

    def validity_radius(self, slack: float = 3.0) -> float:
        """Radius of the invertible region, capped at ``slack`` frame radii."""
        return self.model.monotone_radius(slack * self.frame.max_radius())

    def backproject(self, pixels) -> np.ndarray:
        """Rays ``(x, y)`` on the ``z=1`` plane; NaN where the model is not invertible."""
        p = self.frame.normalize(pixels)
        r = np.linalg.norm(p, axis=-1)
        ok = r <= self.validity_radius()
        h = self.model.h(r)
        ray = p / h[..., None] / self.focal_scale
        ray[~ok] = np.nan
        return ray

    def project(self, rays) -> np.ndarray:
        """Pixels for rays ``(x, y)``; NaN outside the invertible region."""
        u = np.asarray(rays, dtype=float) * self.focal_scale
        t = np.linalg.norm(u, axis=-1)
        rho = self.model.radial_distort(t, self.validity_radius())
        scale = np.where(t > 0, rho / np.where(t > 0, t, 1.0), 1.0 / self.model.h(0.0))
        return self.frame.denormalize(u * scale[..., None])
