import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from radialavg.geometry import DivisionModel, FundamentalMatrix, so3_exp

settings.register_profile("default", max_examples=50, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotation(rng, scale=1.0):
    return so3_exp(rng.normal(scale=scale, size=3))


def two_view(rng, n, model_a, model_b, focal=0.6, max_radius=0.5):
    """Exact normalized correspondences ``p -> q`` and the true F for two pinhole-plus-distortion views.

    The undistorted point of a pixel ``x`` is ``U(x) = x / h(|x|)``, equal to
    ``focal * (X/Z, Y/Z)``; F is expressed for the ``(x, h(|x|))`` lifting.
    """
    R = random_rotation(rng, 0.2)
    t = rng.normal(size=3)
    t /= np.linalg.norm(t)
    K_inv = np.diag([1 / focal, 1 / focal, 1.0])
    tx = np.array([[0, -t[2], t[1]], [t[2], 0, -t[0]], [-t[1], t[0], 0]])
    F = FundamentalMatrix.from_matrix(K_inv @ tx @ R @ K_inv)

    ra = model_a.monotone_radius(max_radius)
    rb = model_b.monotone_radius(max_radius)
    ua_max = model_a.radial_undistort(ra)
    ub_max = model_b.radial_undistort(rb)
    pa, pb = np.zeros((0, 2)), np.zeros((0, 2))
    while len(pa) < n:
        m = 4 * n + 16
        Xa = np.column_stack([rng.uniform(-1, 1, (m, 2)), rng.uniform(2, 6, m)])
        Xb = Xa @ R.T + t
        ok = Xb[:, 2] > 0.5
        ua = focal * Xa[ok, :2] / Xa[ok, 2:]
        ub = focal * Xb[ok, :2] / Xb[ok, 2:]
        ok = (np.linalg.norm(ua, axis=1) < ua_max) & (np.linalg.norm(ub, axis=1) < ub_max)
        pa = np.vstack([pa, _distort(model_a, ua[ok], ra)])
        pb = np.vstack([pb, _distort(model_b, ub[ok], rb)])
    return pa[:n], pb[:n], F


def _distort(model, u, r_max):
    t = np.linalg.norm(u, axis=1)
    rho = np.asarray(model.radial_distort(t, r_max), dtype=float)
    scale = np.where(t > 0, rho / np.where(t > 0, t, 1.0), 1.0)
    return u * scale[:, None]


def canonical_distance(F1, F2):
    """Frobenius distance between unit-norm matrices, minimized over sign."""
    A = F1.matrix if isinstance(F1, FundamentalMatrix) else np.asarray(F1) / np.linalg.norm(F1)
    B = F2.matrix if isinstance(F2, FundamentalMatrix) else np.asarray(F2) / np.linalg.norm(F2)
    return min(np.linalg.norm(A - B), np.linalg.norm(A + B))


def one_param(lam, degree=2):
    return DivisionModel.one_parameter(lam, degree)
