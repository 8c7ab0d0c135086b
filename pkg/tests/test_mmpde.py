import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmpdemesh.diagnostics import gradient_check, random_test_problem
from mmpdemesh.errors import DegenerateElement, ZeroSurfaceGradient
from mmpdemesh.functionals import FunctionalSpec, balance_p, eval_g_value
from mmpdemesh.mesh import (FIXED_VERTEX, BoundaryConstraint, ComputationalMesh, SimplicialMesh,
                            box_mesh, perturb_mesh, reference_equilateral, unit_square_mesh)
from mmpdemesh.metric import AnalyticMetric, IdentityMetric
from mmpdemesh.mmpde import (MmpdeProblem, apply_constraints, assemble_velocities,
                             discrete_functional, element_energies, fd_gradient,
                             local_velocities, nodal_forces)

WINSLOW = FunctionalSpec.winslow()
HUANG = FunctionalSpec.huang()


def perturbed(d, seed=0, boundary="slide", n=None):
    n = n or (6 if d == 2 else 3)
    base = unit_square_mesh(n, boundary=boundary) if d == 2 else box_mesh(n, boundary=boundary)
    return perturb_mesh(base, 0.25 / n, seed)


def test_single_reference_element_winslow():
    for d in (2, 3):
        ref = reference_equilateral(d)
        mesh = SimplicialMesh(ref.vertices, [list(range(d + 1))])
        prob = MmpdeProblem(mesh, functional=WINSLOW)
        assert discrete_functional(prob) == pytest.approx(ref.volume * d, rel=1e-13)


def test_two_element_sum_by_hand():
    mesh = SimplicialMesh([[0, 0], [1, 0], [1, 1], [0, 1]], [[0, 1, 2], [0, 2, 3]])
    M = np.diag([2.0, 0.5])
    prob = MmpdeProblem(mesh, AnalyticMetric.constant(M), HUANG)
    Ehat = ComputationalMesh.master_copies(2, 2).edge_matrix(0)
    total = 0.0
    for el in mesh.elements:
        x = mesh.vertices[el]
        E = (x[1:] - x[0]).T
        J = Ehat @ np.linalg.inv(E)
        total += 0.5 * abs(np.linalg.det(E)) * eval_g_value(
            HUANG, J, np.linalg.det(Ehat) / np.linalg.det(E), M)
    assert discrete_functional(prob) == pytest.approx(total, rel=1e-14)


@pytest.mark.parametrize("d", [2, 3])
def test_functional_metric_scaling(d):
    mesh = perturbed(d)
    base = AnalyticMetric.constant(np.diag([1.0, 2.0, 3.0][:d]))
    c = 3.7
    I0 = discrete_functional(MmpdeProblem(mesh, base, HUANG))
    I1 = discrete_functional(MmpdeProblem(mesh, base.scaled(c), HUANG))
    assert I1 == pytest.approx(c ** (d * (1 - HUANG.p) / 2) * I0, rel=1e-12)


def test_inverted_element_identified():
    mesh = unit_square_mesh(3)
    x = mesh.vertices.copy()
    k = 4
    a, b, c = mesh.elements[k]
    x[c] = x[a] + x[b] - x[c]  # reflect through the midpoint of the opposite edge
    prob = MmpdeProblem(mesh)
    vol = mesh.with_vertices(x).signed_volumes()
    bad = int(np.flatnonzero(vol <= 0)[0])
    with pytest.raises(DegenerateElement) as exc:
        discrete_functional(prob, x)
    assert exc.value.element == bad


def test_local_velocities_single_element_fd():
    rng = np.random.default_rng(4)
    for spec in (WINSLOW, HUANG):
        for _ in range(5):
            x = rng.uniform(0, 1, (3, 2))
            if np.linalg.det((x[1:] - x[0]).T) < 0:
                x[[1, 2]] = x[[2, 1]]
            mesh = SimplicialMesh(x, [[0, 1, 2]])
            prob = MmpdeProblem(mesh, functional=spec)
            v = local_velocities(prob, 0)
            vol = abs(np.linalg.det((x[1:] - x[0]).T)) / 2
            fd = fd_gradient(prob)
            np.testing.assert_allclose(vol * v, -fd, rtol=1e-7, atol=1e-7 * np.abs(fd).max())


def test_reference_element_is_critical_for_winslow():
    ref = reference_equilateral(2)
    prob = MmpdeProblem(SimplicialMesh(ref.vertices, [[0, 1, 2]]), functional=WINSLOW)
    assert np.abs(assemble_velocities(prob)).max() <= 1e-12


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("spec", [WINSLOW, HUANG], ids=["winslow", "huang"])
def test_uniform_fixed_grid_is_critical(d, spec):
    mesh = unit_square_mesh(5, boundary="fixed") if d == 2 else box_mesh(3, boundary="fixed")
    assert np.abs(assemble_velocities(MmpdeProblem(mesh, functional=spec))).max() <= 1e-12


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("spec", [WINSLOW, HUANG], ids=["winslow", "huang"])
@pytest.mark.parametrize("metric", ["identity", "affine"])
def test_velocity_is_scaled_negative_gradient(d, spec, metric):
    for seed in range(3):
        assert gradient_check(random_test_problem(d, seed, spec, metric)) <= 1e-6


@pytest.mark.parametrize("d", [2, 3])
@pytest.mark.parametrize("spec", [WINSLOW, HUANG], ids=["winslow", "huang"])
def test_flow_decreases_energy(d, spec):
    prob = MmpdeProblem(perturbed(d, 2), functional=spec)
    v = assemble_velocities(prob)
    x = prob.mesh.vertices
    delta = 1e-4 / np.abs(v).max()
    assert discrete_functional(prob, x + delta * v) < discrete_functional(prob)


@pytest.mark.parametrize("c", [0.1, 7.0])
@pytest.mark.parametrize("spec", [WINSLOW, HUANG], ids=["winslow", "huang"])
def test_metric_scaling_invariance(c, spec):
    rng = np.random.default_rng(8)
    S0 = np.array([[2.0, 0.3], [0.3, 1.0]])
    S = rng.uniform(-0.2, 0.2, (2, 2, 2))
    S = S + np.swapaxes(S, 1, 2)
    field = AnalyticMetric(lambda p: S0 + np.einsum("na,aij->nij", p, S), 2)
    mesh = perturbed(2, 4)
    v0 = assemble_velocities(MmpdeProblem(mesh, field, spec))
    v1 = assemble_velocities(MmpdeProblem(mesh, field.scaled(c), spec))
    assert np.abs(v1 - v0).max() <= 1e-12 * np.abs(v0).max()


def test_translation_equivariance():
    mesh = perturbed(2, 6)
    shift = np.array([3.0, -1.5])
    S = np.array([[0.2, 0.05], [0.05, -0.1]])

    def field(p, offset=np.zeros(2)):
        return np.eye(2) * 2 + (p - offset)[:, :1, None] * S

    a = assemble_velocities(MmpdeProblem(mesh, AnalyticMetric(field, 2), HUANG))
    moved = mesh.with_vertices(mesh.vertices + shift)
    b = assemble_velocities(MmpdeProblem(moved, AnalyticMetric(lambda p: field(p, shift), 2),
                                         HUANG))
    np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-12 * np.abs(a).max())


def test_apply_constraints_examples():
    mesh = SimplicialMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]],
                          [BoundaryConstraint.on_surface(lambda p: np.array([0.0, 1.0]))] * 2
                          + [FIXED_VERTEX])
    v = np.array([[1.0, 1.0], [2.0, 0.0], [5.0, 5.0]])
    out = apply_constraints(v, mesh)
    np.testing.assert_allclose(out, [[1, 0], [2, 0], [0, 0]])
    np.testing.assert_allclose(apply_constraints(out, mesh), out)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10 ** 6), st.sampled_from([2, 3]))
def test_projection_removes_normal(seed, d):
    rng = np.random.default_rng(seed)
    n = rng.standard_normal(d)
    n /= max(np.linalg.norm(n), 1e-3)
    c = BoundaryConstraint.on_surface(lambda p, n=n: np.broadcast_to(n, p.shape))
    x = rng.uniform(size=(d + 1, d))
    mesh = SimplicialMesh(x, [list(range(d + 1))], [c] * (d + 1))
    v = rng.standard_normal((d + 1, d))
    if np.linalg.norm(n) < 1e-12:
        return
    out = apply_constraints(v, mesh)
    assert np.abs(out @ n).max() <= 1e-12 * np.linalg.norm(v, axis=1).max() * np.linalg.norm(n)


def test_box_boundary_velocities_stay_in_faces():
    mesh = perturbed(3, 1, "slide", 2)
    v = assemble_velocities(MmpdeProblem(mesh))
    x = mesh.vertices
    on = (x == 0) | (x == 1)
    # components normal to a face the vertex lies on vanish; edge vertices keep one component
    assert np.all(v[on] == 0)
    edge = on.sum(axis=1) == 2
    assert np.abs(v[edge]).max() > 0


def test_zero_surface_gradient():
    c = BoundaryConstraint.on_surface(lambda p: np.zeros_like(p))
    mesh = SimplicialMesh([[0, 0], [1, 0], [0, 1]], [[0, 1, 2]], [c, c, c])
    with pytest.raises(ZeroSurfaceGradient):
        apply_constraints(np.ones((3, 2)), mesh)


def test_all_fixed_problem():
    base = perturbed(2, 3)
    mesh = SimplicialMesh(base.vertices, base.elements, [FIXED_VERTEX] * base.n_vertices)
    prob = MmpdeProblem(mesh)
    assert not assemble_velocities(prob).any()
    assert np.abs(fd_gradient(prob)).max() > 0


def test_fd_gradient_second_order():
    prob = MmpdeProblem(perturbed(2, 5), functional=HUANG)
    exact = -nodal_forces(prob)
    errs = [np.abs(fd_gradient(prob, h) - exact).max() for h in (2e-2, 1e-2)]
    assert 3.0 < errs[0] / errs[1] < 5.0


def test_assembly_deterministic():
    prob = MmpdeProblem(perturbed(3, 9), functional=HUANG)
    assert np.array_equal(nodal_forces(prob), nodal_forces(prob))


def test_balance_scaled_velocity():
    prob = MmpdeProblem(perturbed(2, 1), functional=HUANG, tau=0.25)
    P = balance_p(HUANG, IdentityMetric(2)(prob.mesh.vertices))
    np.testing.assert_allclose(assemble_velocities(prob, constrained=False),
                               (P / 0.25)[:, None] * nodal_forces(prob))


def test_problem_validation():
    mesh = unit_square_mesh(2)
    with pytest.raises(ValueError):
        MmpdeProblem(mesh, tau=0.0)
    with pytest.raises(ValueError):
        MmpdeProblem(mesh, computational=ComputationalMesh.master_copies(3, 2))
    explicit = MmpdeProblem(mesh, computational=ComputationalMesh.explicit(mesh))
    assert np.abs(assemble_velocities(explicit)).max() <= 1e-12
    assert element_energies(explicit).shape == (mesh.n_elements,)
