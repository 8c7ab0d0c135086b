import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpdemesh.errors import NonSPDMetric, SingularPatch
from mmpdemesh.mesh import SimplicialMesh, box_mesh, perturb_mesh, unit_square_mesh
from mmpdemesh.metric import (AnalyticMetric, IdentityMetric, NodalHessianField, NodalMetric,
                              absolute_spd, build_adaptation_metric, element_metric,
                              estimate_bounds, recover_hessian, solve_regularization_alpha)
from mmpdemesh.scenarios import adaptation_metric, sine_wave

TRI = SimplicialMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]])


def test_element_metric_examples():
    np.testing.assert_array_equal(element_metric(IdentityMetric(2), TRI, 0), np.eye(2))
    const = AnalyticMetric.constant(np.diag([2.0, 3.0]))
    np.testing.assert_array_equal(element_metric(const, TRI, 0), np.diag([2.0, 3.0]))
    shifted = SimplicialMesh(TRI.vertices + [1.0, 0.0], TRI.elements)
    lin = AnalyticMetric(lambda p: p[:, 0, None, None] * np.eye(2), 2)
    np.testing.assert_allclose(element_metric(lin, shifted, 0), 4 / 3 * np.eye(2), rtol=1e-15)
    bad = AnalyticMetric.constant(np.diag([1.0, -1.0]))
    with pytest.raises(NonSPDMetric):
        element_metric(bad, TRI, 0)


def _mesh(d, seed=0):
    base = unit_square_mesh(6) if d == 2 else box_mesh(3)
    return perturb_mesh(base, 0.2 / (6 if d == 2 else 3), seed)


@pytest.mark.parametrize("d", [2, 3])
def test_hessian_recovery_quadratic_exact(d):
    rng = np.random.default_rng(d)
    mesh = _mesh(d)
    A = rng.standard_normal((d, d))
    H = A + A.T
    b = rng.standard_normal(d)
    x = mesh.vertices
    u = 0.5 * np.einsum("na,ab,nb->n", x, H, x) + x @ b + 3.0
    rec = recover_hessian(mesh, u).values
    assert np.abs(rec - H).max() <= 1e-8 * np.abs(H).max()


def test_hessian_recovery_examples():
    mesh = _mesh(2, 5)
    x = mesh.vertices
    np.testing.assert_allclose(recover_hessian(mesh, x[:, 0] ** 2).values,
                               np.broadcast_to(np.diag([2.0, 0.0]), (mesh.n_vertices, 2, 2)),
                               atol=1e-9)
    np.testing.assert_allclose(recover_hessian(mesh, 3 * x[:, 0] - x[:, 1]).values, 0, atol=1e-9)
    np.testing.assert_allclose(recover_hessian(mesh, x[:, 0] * x[:, 1]).values,
                               np.broadcast_to([[0, 1], [1, 0]], (mesh.n_vertices, 2, 2)),
                               atol=1e-9)


def test_hessian_recovery_singular_patch():
    with pytest.raises(SingularPatch):
        recover_hessian(TRI, np.zeros(3))


def test_absolute_spd_examples():
    np.testing.assert_allclose(absolute_spd(np.diag([2.0, -3.0])), np.diag([2.0, 3.0]),
                               atol=1e-15)
    np.testing.assert_array_equal(absolute_spd(np.zeros((2, 2))), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 3]))
def test_absolute_spd_properties(seed, d):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((d, d))
    H = A + A.T
    out = absolute_spd(H)
    np.testing.assert_allclose(out, out.T, atol=1e-14)
    np.testing.assert_allclose(np.sort(np.linalg.eigvalsh(out)),
                               np.sort(np.abs(np.linalg.eigvalsh(H))), atol=1e-12)
    P = A @ A.T
    np.testing.assert_allclose(absolute_spd(P), P, atol=1e-12 * np.abs(P).max())


def _constant_hessian(mesh, H):
    return NodalHessianField(mesh, np.broadcast_to(H, (mesh.n_vertices,) + H.shape).copy())


@pytest.mark.parametrize("c", [1.0, 4.0, 0.3])
def test_alpha_closed_form_2d(c):
    mesh = unit_square_mesh(5)
    alpha = solve_regularization_alpha(mesh, _constant_hessian(mesh, c * np.eye(2)))
    # (alpha + c)^(2/3) = 2 c^(2/3)
    assert alpha.value == pytest.approx((2 ** 1.5 - 1) * c, rel=1e-6)
    assert not alpha.clamped and abs(alpha.residual) <= 1e-8


def test_alpha_closed_form_3d():
    mesh = box_mesh(2)
    c = 2.0
    alpha = solve_regularization_alpha(mesh, _constant_hessian(mesh, c * np.eye(3)))
    # (alpha + c)^(3/4) = 2 c
    assert alpha.value == pytest.approx((2 * c) ** (4 / 3) - c, rel=1e-6)


def test_alpha_degenerate_and_monotone():
    mesh = unit_square_mesh(4)
    zero = solve_regularization_alpha(mesh, _constant_hessian(mesh, np.zeros((2, 2))))
    assert zero.value == 1.0 and zero.degenerate
    H = recover_hessian(mesh, sine_wave(mesh.vertices))
    absH = absolute_spd(H.values)
    lhs = []
    for a in np.logspace(-6, 6, 40):
        detA = np.linalg.det(a * np.eye(2) + absH)
        vol = mesh.volumes()
        lhs.append(np.sum(vol * (detA ** (1 / 3))[mesh.elements].mean(axis=1)))
    assert np.all(np.diff(lhs) > 0)


def test_adaptation_metric_examples():
    mesh = unit_square_mesh(1)
    zero = _constant_hessian(mesh, np.zeros((2, 2)))
    np.testing.assert_allclose(build_adaptation_metric(zero, 1.0).values, np.eye(2)[None].repeat(4, 0),
                               rtol=1e-15)
    h = _constant_hessian(mesh, np.diag([3.0, 0.0]))
    np.testing.assert_allclose(build_adaptation_metric(h, 1.0).values[0],
                               4 ** (-1 / 6) * np.diag([4.0, 1.0]), rtol=1e-14)
    with pytest.raises(ValueError):
        build_adaptation_metric(h, 0.0)


@pytest.mark.parametrize("d", [2, 3])
def test_adaptation_metric_determinant_and_eigenvectors(d):
    rng = np.random.default_rng(11)
    mesh = unit_square_mesh(2) if d == 2 else box_mesh(1)
    A = rng.standard_normal((mesh.n_vertices, d, d))
    H = NodalHessianField(mesh, A + np.swapaxes(A, 1, 2))
    alpha = 0.7
    M = build_adaptation_metric(H, alpha).values
    B = alpha * np.eye(d) + absolute_spd(H.values)
    np.testing.assert_allclose(np.linalg.det(M), np.linalg.det(B) ** (1 - d / 6), rtol=1e-12)
    np.testing.assert_allclose(M @ H.values, H.values @ M, atol=1e-10)


def test_nodal_metric_reproduces_affine_fields():
    rng = np.random.default_rng(2)
    mesh = perturb_mesh(unit_square_mesh(5), 0.03, 1)
    S0 = np.array([[3.0, 0.5], [0.5, 2.0]])
    S = rng.uniform(-0.3, 0.3, (2, 2, 2))
    S = S + np.swapaxes(S, 1, 2)

    def field(p):
        return S0 + np.einsum("na,aij->nij", p, S)

    nodal = NodalMetric(mesh, field(mesh.vertices))
    pts = rng.uniform(0.0, 1.0, (200, 2))
    np.testing.assert_allclose(nodal(pts), field(pts), rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(nodal(pts[0]), field(pts[:1])[0], rtol=1e-12)


def test_estimate_bounds():
    mesh = unit_square_mesh(4)
    assert estimate_bounds(IdentityMetric(2), mesh) == (1.0, 1.0)
    lo, hi = estimate_bounds(AnalyticMetric.constant(np.diag([2.0, 5.0])), mesh)
    assert lo == pytest.approx(2.0) and hi == pytest.approx(5.0)
    mesh = unit_square_mesh(24)
    metric, _ = adaptation_metric(mesh, sine_wave(mesh.vertices))
    lo, hi = estimate_bounds(metric, mesh)
    assert 1 < hi / lo < math.inf
    with pytest.raises(NonSPDMetric):
        estimate_bounds(AnalyticMetric.constant(-np.eye(2)), mesh)


def test_scaled_metric():
    mesh = unit_square_mesh(2)
    m = AnalyticMetric.constant(np.diag([1.0, 2.0])).scaled(7.0)
    np.testing.assert_allclose(m(mesh.vertices), 7 * np.diag([1.0, 2.0])[None].repeat(9, 0))
