"""Sampson residuals of the distorted epipolar constraint, with derivatives.

For a correspondence ``p -> q`` (normalized coordinates of images a and b)
the constraint is ``C = U_b(q)^T F U_a(p)`` with ``U(x) = (x, h(|x|))``. The
signed residual returned here is ``e = C / sqrt(|dC/dp|^2 + |dC/dq|^2)`` so
that ``e**2`` is the Sampson error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DivisionModel, FundamentalMatrix


@dataclass
class SampsonJacobian:
    """Per-correspondence derivatives of the signed residual.

    ``F`` is w.r.t. the 9 row-major entries of the matrix, ``theta_a`` and
    ``theta_b`` w.r.t. the free coefficients (powers 2..k) of each model, and
    ``p``/``q`` w.r.t. the normalized point coordinates.
    """

    F: np.ndarray
    theta_a: np.ndarray
    theta_b: np.ndarray
    p: np.ndarray | None = None
    q: np.ndarray | None = None


def _as_matrix(F) -> np.ndarray:
    return F.matrix if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)


def sampson_residuals(p, q, F, model_a: DivisionModel, model_b: DivisionModel,
                      jacobian: bool = False, point_jacobian: bool = False):
    """Signed Sampson residuals; degenerate rows (zero gradient) are NaN.

    Returns ``e`` or ``(e, SampsonJacobian)``.
    """
    M = _as_matrix(F)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    q = np.atleast_2d(np.asarray(q, dtype=float))
    rp = np.linalg.norm(p, axis=1)
    rq = np.linalg.norm(q, axis=1)
    hp, gp = model_a.h(rp), model_a.g(rp)
    hq, gq = model_b.h(rq), model_b.g(rq)
    up = np.column_stack([p, hp])
    vq = np.column_stack([q, hq])
    a = up @ M.T  # F u_p
    b = vq @ M  # F^T v_q
    C = np.einsum("ni,ni->n", vq, a)
    Jp = b[:, :2] + (b[:, 2] * gp)[:, None] * p
    Jq = a[:, :2] + (a[:, 2] * gq)[:, None] * q
    D = np.einsum("ni,ni->n", Jp, Jp) + np.einsum("ni,ni->n", Jq, Jq)
    degenerate = ~(D > 0)
    s = np.sqrt(np.where(degenerate, 1.0, D))
    e = np.where(degenerate, np.nan, C / s)
    if not (jacobian or point_jacobian):
        return e

    # M_p J_p and M_q J_q as 3-vectors
    MpJp = np.column_stack([Jp, gp * np.einsum("ni,ni->n", p, Jp)])
    MqJq = np.column_stack([Jq, gq * np.einsum("ni,ni->n", q, Jq)])
    half = np.where(degenerate, 0.0, e / (2.0 * s))

    def finish(dC, dD):
        out = (dC - half[:, None] * dD) / s[:, None]
        out[degenerate] = 0.0
        return out

    dC_F = (vq[:, :, None] * up[:, None, :]).reshape(-1, 9)
    dD_F = 2.0 * ((MqJq[:, :, None] * up[:, None, :]) + (vq[:, :, None] * MpJp[:, None, :])).reshape(-1, 9)
    jac = SampsonJacobian(F=finish(dC_F, dD_F), theta_a=None, theta_b=None)

    ja = model_a.powers
    rpj = rp[:, None] ** ja
    rpj2 = rp[:, None] ** (ja - 2)
    dC_a = b[:, 2:3] * rpj
    pJp = np.einsum("ni,ni->n", p, Jp)
    dD_a = 2.0 * (b[:, 2:3] * ja * rpj2 * pJp[:, None]) + 2.0 * (MqJq @ M[:, 2])[:, None] * rpj
    jac.theta_a = finish(dC_a, dD_a)

    jb = model_b.powers
    rqj = rq[:, None] ** jb
    rqj2 = rq[:, None] ** (jb - 2)
    dC_b = a[:, 2:3] * rqj
    qJq = np.einsum("ni,ni->n", q, Jq)
    dD_b = 2.0 * (a[:, 2:3] * jb * rqj2 * qJq[:, None]) + 2.0 * (MpJp @ M[2, :])[:, None] * rqj
    jac.theta_b = finish(dC_b, dD_b)

    if point_jacobian:
        # M_p, M_q as (N, 3, 2)
        Mp = _lift_jacobian(p, gp)
        Mq = _lift_jacobian(q, gq)
        cross_p = np.einsum("ni,ij,njk->nk", MqJq, M, Mp)  # Jq . dJq/dp
        cross_q = np.einsum("ni,ji,njk->nk", MpJp, M, Mq)  # Jp . dJp/dq
        self_p = b[:, 2:3] * _radial_term(p, rp, gp, model_a.dg(rp), Jp)
        self_q = a[:, 2:3] * _radial_term(q, rq, gq, model_b.dg(rq), Jq)
        jac.p = finish(Jp, 2.0 * (self_p + cross_p))
        jac.q = finish(Jq, 2.0 * (self_q + cross_q))
    return e, jac


def _lift_jacobian(x, g):
    n = x.shape[0]
    M = np.zeros((n, 3, 2))
    M[:, 0, 0] = 1.0
    M[:, 1, 1] = 1.0
    M[:, 2, :] = g[:, None] * x
    return M


def _radial_term(x, r, g, dg, J):
    """``(d(g(|x|) x)/dx)^T J`` with the ``1/r`` singularity removed."""
    xJ = np.einsum("ni,ni->n", x, J)
    safe = np.where(r > 0, r, 1.0)
    coef = np.where(r > 0, dg / safe, 0.0)
    return g[:, None] * J + (coef * xJ)[:, None] * x


def sampson_error(p, q, F, model_a: DivisionModel, model_b: DivisionModel) -> np.ndarray:
    """Sampson error ``r^2``; degenerate correspondences give ``inf``."""
    e = sampson_residuals(p, q, F, model_a, model_b)
    return np.where(np.isnan(e), np.inf, e * e)


def gauss_legendre(radius: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * radius * (x + 1.0), 0.5 * radius * w


def regularization(model: DivisionModel, radius: float, n_samples: int = 128) -> float:
    """Gauss-Legendre estimate of the integral of ``(dU/dr)^2`` over ``[0, radius]``."""
    if not model.is_valid(radius):
        return np.inf
    r, w = gauss_legendre(radius, n_samples)
    return float(np.sum(w * model.radial_undistort_derivative(r) ** 2))


def regularization_residuals(model: DivisionModel, radius: float, n_samples: int = 128,
                             weight: float = 1.0, jacobian: bool = False):
    """Residuals whose squared sum is ``weight * regularization(model, radius)``.

    An invalid model yields an infinite residual vector.
    """
    r, w = gauss_legendre(radius, n_samples)
    sw = np.sqrt(weight * w)
    m = model.powers.size
    if not model.is_valid(radius):
        res = np.full(n_samples, np.inf)
        return (res, np.zeros((n_samples, m))) if jacobian else res
    h = model.h(r)
    dh = model.dh(r)
    res = sw * (h - r * dh) / h**2
    if not jacobian:
        return res
    j = model.powers
    rj = r[:, None] ** j
    J = ((1 - j) * rj) / (h**2)[:, None] - 2.0 * ((h - r * dh) / h**3)[:, None] * rj
    return res, sw[:, None] * J
