"""Discrete meshing functional and the MMPDE nodal velocity system."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateElement, ZeroSurfaceGradient
from .functionals import FunctionalSpec, balance_p, eval_g, eval_g_value
from .mesh import (EPS_VOL, FIXED, ON_SURFACE, ComputationalMesh, SimplicialMesh,
                   edge_matrices, gradients_from_inverse, vertex_patches)
from .metric import IdentityMetric, MetricField


@dataclass(eq=False)
class MmpdeProblem:
    """Physical mesh, computational mesh, metric, functional and time scale ``tau``."""

    mesh: SimplicialMesh
    metric: MetricField = None
    functional: FunctionalSpec = None
    tau: float = 1.0
    computational: ComputationalMesh = None

    def __post_init__(self):
        if self.metric is None:
            self.metric = IdentityMetric(self.mesh.dim)
        if self.functional is None:
            self.functional = FunctionalSpec.huang()
        if self.computational is None:
            self.computational = ComputationalMesh.master_copies(self.mesh.n_elements, self.mesh.dim)
        if self.computational.n_elements != self.mesh.n_elements:
            raise ValueError("physical and computational meshes differ in element count")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        self._patches = None

    @property
    def dim(self):
        return self.mesh.dim

    def with_mesh(self, mesh):
        return MmpdeProblem(mesh, self.metric, self.functional, self.tau, self.computational)

    def with_metric(self, metric):
        return MmpdeProblem(self.mesh, metric, self.functional, self.tau, self.computational)

    def patches(self):
        if self._patches is None:
            self._patches = vertex_patches(self.mesh.elements, self.mesh.n_vertices)
        return self._patches


@dataclass
class _Geometry:
    Einv: np.ndarray
    vol: np.ndarray
    Ehat: np.ndarray
    J: np.ndarray
    detJ: np.ndarray
    Mv: np.ndarray
    MK: np.ndarray


def _ehat(problem, subset=None):
    Ehat = problem.computational.edge_matrices()
    if Ehat.ndim == 3 and subset is not None:
        Ehat = Ehat[subset]
    return Ehat


def _geometry(problem, x, subset=None, Mv=None):
    el = problem.mesh.elements if subset is None else problem.mesh.elements[subset]
    d = x.shape[1]
    E = edge_matrices(x, el)
    detE = np.linalg.det(E)
    bad = np.flatnonzero(detE <= EPS_VOL)
    if bad.size:
        k = bad[0] if subset is None else np.atleast_1d(subset)[bad[0]]
        raise DegenerateElement(k, det=detE[bad[0]])
    Einv = np.linalg.inv(E)
    Ehat = _ehat(problem, subset)
    J = Ehat @ Einv
    detJ = np.linalg.det(Ehat) / detE
    if subset is None:
        if Mv is None:
            Mv = problem.metric(x)
        MK = Mv[el].mean(axis=1)
        Mloc = Mv[el]
    else:
        Mloc = problem.metric(x[el].reshape(-1, d)).reshape(el.shape + (d, d))
        MK = Mloc.mean(axis=1)
    return _Geometry(Einv, detE / math.factorial(d), Ehat, J, detJ, Mloc, MK)


def element_energies(problem, x=None, subset=None, Mv=None):
    """Per-element terms ``|K| G(E_hat E^-1, det E_hat / det E, M_K, x_K)``."""
    x = problem.mesh.vertices if x is None else np.asarray(x, dtype=float)
    g = _geometry(problem, x, subset, Mv=Mv)
    return g.vol * eval_g_value(problem.functional, g.J, g.detJ, g.MK)


def discrete_functional(problem, x=None, Mv=None):
    """Riemann-sum value ``I_h`` of the meshing functional."""
    return float(element_energies(problem, x, Mv=Mv).sum())


def _local_velocities(problem, g):
    spec = problem.functional
    d = g.Einv.shape[-1]
    der = eval_g(spec, g.J, g.detJ, g.MK)
    Einv = g.Einv
    V = (-der.G[:, None, None] * Einv
         + Einv @ der.dG_dJ @ g.Ehat @ Einv
         + (der.dG_ddet * g.detJ)[:, None, None] * Einv)
    # tr(dG/dM M_{j,K}) weighted basis gradients
    tr_j = np.einsum("kab,kjba->kj", der.dG_dM, g.Mv)
    w = np.einsum("kj,kja->ka", tr_j, gradients_from_inverse(Einv))
    V -= (w + der.dG_dx)[:, None, :] / (d + 1)
    v0 = -V.sum(axis=1) - w - der.dG_dx
    return np.concatenate([v0[:, None, :], V], axis=1)


def local_velocities(problem, k, x=None):
    """Local velocities ``v_0^K .. v_d^K`` of element ``k`` as ``(d+1, d)``."""
    x = problem.mesh.vertices if x is None else np.asarray(x, dtype=float)
    g = _geometry(problem, x, subset=np.array([k]))
    return _local_velocities(problem, g)[0]


def nodal_forces(problem, x=None, Mv=None):
    """``sum_K |K| v_{i_K}^K`` for every vertex, i.e. ``-dI_h/dx_i``."""
    x = problem.mesh.vertices if x is None else np.asarray(x, dtype=float)
    g = _geometry(problem, x, Mv=Mv)
    local = _local_velocities(problem, g) * g.vol[:, None, None]
    el = problem.mesh.elements
    n, d = x.shape
    flat = el.ravel()
    F = np.empty((n, d))
    for a in range(d):
        F[:, a] = np.bincount(flat, weights=local[:, :, a].ravel(), minlength=n)
    return F


def assemble_velocities(problem, x=None, constrained=True, Mv=None):
    """Nodal mesh velocities ``(P(x_i)/tau) sum_K |K| v_{i_K}^K``."""
    x = problem.mesh.vertices if x is None else np.asarray(x, dtype=float)
    if Mv is None:
        Mv = problem.metric(x)
    F = nodal_forces(problem, x, Mv=Mv)
    P = balance_p(problem.functional, Mv)
    vel = (P / problem.tau)[:, None] * F
    if constrained:
        vel = apply_constraints(vel, problem.mesh, x)
    return vel


_GROUP_CACHE = {}


def _constraint_groups(constraints):
    key = id(constraints)
    hit = _GROUP_CACHE.get(key)
    if hit is not None and hit[0] is constraints:
        return hit[1], hit[2]
    fixed = []
    groups = {}
    for i, c in enumerate(constraints):
        if c.kind == FIXED:
            fixed.append(i)
        elif c.kind == ON_SURFACE:
            groups.setdefault(id(c), (c, []))[1].append(i)
    out = (np.array(fixed, dtype=np.int64),
           [(c, np.array(idx, dtype=np.int64)) for c, idx in groups.values()])
    if len(_GROUP_CACHE) > 64:
        _GROUP_CACHE.clear()
    _GROUP_CACHE[key] = (constraints, out[0], out[1])
    return out


def apply_constraints(vel, mesh, x=None):
    """Zero fixed-vertex velocities and remove surface-normal components."""
    x = mesh.vertices if x is None else x
    out = np.array(vel, dtype=float, copy=True)
    fixed, groups = _constraint_groups(mesh.constraints)
    out[fixed] = 0.0
    for c, idx in groups:
        normals = c.normals(x[idx])
        norms = np.linalg.norm(normals, axis=2)
        if np.any(norms <= 1e-12):
            bad = idx[np.flatnonzero((norms <= 1e-12).any(axis=1))[0]]
            raise ZeroSurfaceGradient(f"vertex {bad}: surface gradient vanishes")
        basis = []
        for j in range(normals.shape[1]):
            q = normals[:, j].copy()
            for b in basis:
                q -= np.einsum("na,na->n", q, b)[:, None] * b
            q /= np.linalg.norm(q, axis=1)[:, None]
            basis.append(q)
        v = out[idx]
        for b in basis:
            v = v - np.einsum("na,na->n", v, b)[:, None] * b
        out[idx] = v
    return out


def fd_gradient(problem, h=1e-6, x=None, vertices=None):
    """Central-difference gradient ``dI_h/dx_i`` (constraints not applied).

    ``h`` is relative to the mean edge length of each vertex patch. Only the
    patch terms of ``I_h`` depend on ``x_i``, so differences are taken on the
    patch sum. A probe that inverts an element is retried with ``h/10``
    (three times at most).
    """
    x = problem.mesh.vertices if x is None else np.asarray(x, dtype=float)
    n, d = x.shape
    patches = problem.patches()
    el = problem.mesh.elements
    grad = np.zeros((n, d))
    for i in (range(n) if vertices is None else vertices):
        patch = patches[i]
        pts = x[el[patch]]
        scale = np.mean(np.linalg.norm(pts - x[i], axis=2).sum(axis=1) / d)
        step = h * scale
        for attempt in range(4):
            try:
                for a in range(d):
                    xp = x.copy()
                    xp[i, a] += step
                    fp = element_energies(problem, xp, subset=patch).sum()
                    xp[i, a] -= 2 * step
                    fm = element_energies(problem, xp, subset=patch).sum()
                    grad[i, a] = (fp - fm) / (2 * step)
                break
            except DegenerateElement:
                if attempt == 3:
                    raise
                step /= 10.0
    return grad
