"""Minimal and linear solvers for fundamental matrix plus one-parameter distortion.

The nine-point solver assumes a shared coefficient ``lam`` for both images
and solves the resulting quadratic eigenvalue problem

    (D1 + lam * D2 + lam**2 * D3) f = 0

through its companion linearization, reduced to a 10x10 pencil. ``refine_two_sided_lambda`` then lets the
two coefficients separate by Levenberg-Marquardt on the Sampson error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.linalg.lapack

from .geometry import DivisionModel, FundamentalMatrix
from .lm import LMSettings

LAMBDA_MAX = 10.0
IMAG_TOL = 1e-8
DEGENERATE_RCOND = 1e-9
# a root this close to rank 2 certifies an exactly consistent sample
EXACT_RANK_TOL = 1e-9


class DegenerateSampleError(ValueError):
    pass


@dataclass(frozen=True)
class MinimalHypothesis:
    F: FundamentalMatrix
    lam_a: float
    lam_b: float
    refined: bool = False

    def models(self, degree: int = 2) -> tuple[DivisionModel, DivisionModel]:
        return (DivisionModel.one_parameter(self.lam_a, degree),
                DivisionModel.one_parameter(self.lam_b, degree))


def _qep_matrices(p, q):
    n = p.shape[0]
    ph = np.column_stack([p, np.ones(n)])
    qh = np.column_stack([q, np.ones(n)])
    sp = np.einsum("ni,ni->n", p, p)
    sq = np.einsum("ni,ni->n", q, q)
    D1 = (qh[:, :, None] * ph[:, None, :]).reshape(n, 9)
    D2 = np.zeros((n, 9))
    # q_hat^T F e3 * sp + e3^T F p_hat * sq
    D2[:, [2, 5, 8]] += sp[:, None] * qh
    D2[:, 6:9] += sq[:, None] * ph
    D3 = np.zeros((n, 9))
    D3[:, 8] = sp * sq
    return D1, D2, D3


def solve_shared_lambda(p, q, lambda_max: float = LAMBDA_MAX, polish: bool = False) -> list[MinimalHypothesis]:
    """All real solutions ``(F, lam)`` from 9 normalized correspondences ``p -> q``.

    Only the last column of ``D3`` is non-zero, so with ``g = lam * f[8]`` the
    companion form shrinks to the 10x10 pencil

        [D1 0; 0 1] z = lam [-D2 -d3; e9^T 0] z,   z = (f, g).

    Returned matrices are projected to rank 2. When one root is already rank 2
    to machine precision the sample is exact and roots that are not are
    spurious, so they are dropped. Degenerate samples give ``[]``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != (9, 2) or q.shape != (9, 2):
        raise ValueError("solve_shared_lambda needs exactly 9 correspondences")
    D1, D2, D3 = _qep_matrices(p, q)
    s = np.linalg.svd(D1, compute_uv=False)
    if not s[0] > 0 or s[-2] < DEGENERATE_RCOND * s[0]:
        return []
    A = np.zeros((10, 10))
    B = np.zeros((10, 10))
    A[:9, :9] = D1
    A[9, 9] = 1.0
    B[:9, :9] = -D2
    B[:9, 9] = -D3[:, 8]
    B[9, 8] = 1.0
    pairs = _real_eigenpairs(A, B, lambda_max)
    ratios = [_rank_ratio(f) for _, f in pairs]
    if ratios and min(ratios) < EXACT_RANK_TOL:
        pairs = [pf for pf, r in zip(pairs, ratios) if r < EXACT_RANK_TOL]
    out = []
    for lam, f in pairs:
        if polish:
            lam, f = _polish(D1, D2, D3, lam)
            if abs(lam) > lambda_max:
                continue
        try:
            F = FundamentalMatrix.from_matrix(f.reshape(3, 3))
        except ValueError:
            continue
        out.append(MinimalHypothesis(F, lam, lam))
    return _dedupe(out)


def _rank_ratio(f):
    s = np.linalg.svd(f.reshape(3, 3), compute_uv=False)
    return s[2] / s[1] if s[1] > 0 else np.inf


def _real_eigenpairs(A, B, lambda_max):
    alphar, alphai, beta, _, vr, _, info = scipy.linalg.lapack.dggev(A, B, compute_vl=0)
    if info != 0:
        return []
    pairs = []
    n = A.shape[0]
    for k in np.argsort(np.where(beta != 0, alphar / np.where(beta != 0, beta, 1.0), np.inf)):
        if beta[k] == 0:
            continue
        lam_re = alphar[k] / beta[k]
        lam_im = alphai[k] / beta[k]
        if not np.isfinite(lam_re) or abs(lam_im) > IMAG_TOL * max(abs(lam_re), 1.0):
            continue
        if abs(lam_re) > lambda_max:
            continue
        if alphai[k] == 0:
            z = vr[:9, k].astype(complex)
        elif alphai[k] > 0 and k + 1 < n:
            z = vr[:9, k] + 1j * vr[:9, k + 1]
        else:
            z = vr[:9, k - 1] - 1j * vr[:9, k]
        # a numerically real eigenvector up to a complex phase
        z = (z * np.exp(-1j * np.angle(z[np.argmax(np.abs(z))]))).real
        nz = np.linalg.norm(z)
        if not nz > 0:
            continue
        pairs.append((float(lam_re), z / nz))
    return pairs


def _polish(D1, D2, D3, lam, steps: int = 3):
    """Newton refinement of a real QEP eigenpair via the smallest singular vector."""
    f = None
    for _ in range(steps):
        Q = D1 + lam * D2 + lam * lam * D3
        U, _, Vt = np.linalg.svd(Q)
        f = Vt[-1]
        u = U[:, -1]
        dQ = D2 + 2 * lam * D3
        deriv = u @ dQ @ f
        if deriv == 0 or not np.isfinite(deriv):
            break
        # first-order eigenvalue perturbation: u^T (Q + step Q') f = 0
        step = (u @ Q @ f) / deriv
        if not np.isfinite(step):
            break
        lam = lam - step
        if abs(step) < 1e-15 * max(1.0, abs(lam)):
            break
    Q = D1 + lam * D2 + lam * lam * D3
    f = np.linalg.svd(Q)[2][-1]
    return lam, f


def _dedupe(hyps, tol: float = 1e-10):
    out = []
    for h in hyps:
        if any(abs(h.lam_a - o.lam_a) < tol * max(1.0, abs(h.lam_a))
               and np.allclose(h.F.matrix, o.F.matrix, atol=1e-8) for o in out):
            continue
        out.append(h)
    return out


def solve_f_8pt(p, q, model_a: DivisionModel | None = None, model_b: DivisionModel | None = None,
                rcond: float = 1e-10) -> FundamentalMatrix:
    """Linear least-squares fundamental matrix from >= 8 normalized correspondences.

    Points are first lifted with the given division models (identity when
    omitted). Raises :class:`DegenerateSampleError` when the linear system has
    a null space of dimension > 1.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape[0] < 8 or p.shape != q.shape:
        raise ValueError("need at least 8 correspondences")
    model_a = model_a or DivisionModel.identity()
    model_b = model_b or DivisionModel.identity()
    up = np.column_stack([p, model_a.h(np.linalg.norm(p, axis=1))])
    vq = np.column_stack([q, model_b.h(np.linalg.norm(q, axis=1))])
    A = (vq[:, :, None] * up[:, None, :]).reshape(-1, 9)
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    s_full = np.zeros(9)
    s_full[: s.size] = s
    if s_full[7] <= rcond * s_full[0]:
        raise DegenerateSampleError("rank-deficient 8-point system")
    F = Vt[-1].reshape(3, 3)
    U, sv, Vt2 = np.linalg.svd(F)
    sv[2] = 0.0
    return FundamentalMatrix.from_matrix((U * sv) @ Vt2)


def refine_two_sided_lambda(hyp: MinimalHypothesis, p, q, iterations: int = 10) -> MinimalHypothesis:
    """Let ``lam_a`` and ``lam_b`` separate: LM on the Sampson error over inliers ``p -> q``."""
    from .twoview import refine_models

    p = np.asarray(p, dtype=float)
    if p.shape[0] == 0:
        raise ValueError("refine_two_sided_lambda needs a non-empty inlier set")
    ma, mb = hyp.models(2)
    res = refine_models(p, q, hyp.F, ma, mb, reg_weight=0.0,
                        settings=LMSettings(max_iterations=iterations))
    if not res.ok or not res.cost <= res.initial_cost:
        return MinimalHypothesis(hyp.F, hyp.lam_a, hyp.lam_b, refined=False)
    F, ma, mb = res.x
    return MinimalHypothesis(F.canonical(), float(ma.coeffs[2]), float(mb.coeffs[2]), refined=True)
