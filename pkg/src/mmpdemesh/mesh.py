"""Simplicial mesh geometry: edge matrices, volumes, basis gradients,
metric altitudes and diameters, the master element and structured grids.

Batched helpers operate on a coordinate array ``x`` of shape ``(Nv, d)`` and
a connectivity array of shape ``(N, d + 1)``; the per-element functions
taking ``(mesh, k)`` are thin wrappers over them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DegenerateElement, NonSPDMetric, UnsupportedDimension, ZeroSurfaceGradient

EPS_VOL = 1e-300

FREE = "free"
FIXED = "fixed"
ON_SURFACE = "on_surface"


@dataclass(frozen=True, eq=False)
class BoundaryConstraint:
    """Per-vertex movement constraint.

    ``gradients`` holds one callable per constraining surface ``phi = 0``;
    each maps points ``(n, d)`` to surface gradients ``(n, d)``. A vertex
    carrying two gradients in 3D slides along the intersection line.
    """

    kind: str
    gradients: tuple[Callable[[np.ndarray], np.ndarray], ...] = ()

    def __post_init__(self):
        if self.kind not in (FREE, FIXED, ON_SURFACE):
            raise ValueError(f"unknown constraint kind {self.kind!r}")
        if self.kind == ON_SURFACE and not self.gradients:
            raise ValueError("on-surface constraint needs at least one gradient")

    @classmethod
    def on_surface(cls, *gradients):
        return cls(ON_SURFACE, tuple(gradients))

    def normals(self, points):
        """Surface gradients at ``points`` stacked as ``(n, k, d)``."""
        points = np.atleast_2d(points)
        grads = [np.broadcast_to(np.asarray(g(points), dtype=float), points.shape)
                 for g in self.gradients]
        return np.stack(grads, axis=1)


FREE_VERTEX = BoundaryConstraint(FREE)
FIXED_VERTEX = BoundaryConstraint(FIXED)


def _axis_gradient(axis, dim):
    e = np.zeros(dim)
    e[axis] = 1.0

    def grad(points):
        return np.broadcast_to(e, np.shape(points))

    grad.axis = axis
    return grad


@dataclass(eq=False)
class SimplicialMesh:
    vertices: np.ndarray
    elements: np.ndarray
    constraints: tuple = None
    markers: np.ndarray = None

    def __post_init__(self):
        self.vertices = np.array(self.vertices, dtype=float)
        self.elements = np.array(self.elements, dtype=np.int64)
        if self.vertices.ndim != 2:
            raise ValueError("vertices must be a (Nv, d) array")
        d = self.vertices.shape[1]
        if d not in (2, 3):
            raise UnsupportedDimension(f"dimension {d} not supported (need 2 or 3)")
        if self.elements.ndim != 2 or self.elements.shape[1] != d + 1:
            raise ValueError(f"elements must be a (N, {d + 1}) array")
        if self.elements.size and (self.elements.min() < 0
                                   or self.elements.max() >= len(self.vertices)):
            raise IndexError("element vertex index out of range")
        if self.constraints is None:
            self.constraints = (FREE_VERTEX,) * len(self.vertices)
        else:
            self.constraints = tuple(self.constraints)
            if len(self.constraints) != len(self.vertices):
                raise ValueError("need one constraint per vertex")
        if self.markers is None:
            self.markers = np.array([0 if c.kind == FREE else 1 for c in self.constraints],
                                    dtype=np.int64)
        else:
            self.markers = np.asarray(self.markers, dtype=np.int64)

    @property
    def dim(self):
        return self.vertices.shape[1]

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_elements(self):
        return self.elements.shape[0]

    def with_vertices(self, x):
        """Same topology and constraints, new coordinates."""
        return SimplicialMesh(x, self.elements, self.constraints, self.markers)

    def signed_volumes(self, x=None):
        return signed_volumes(self.vertices if x is None else x, self.elements)

    def volumes(self, x=None):
        return np.abs(self.signed_volumes(x))

    def is_nonsingular(self, x=None):
        return bool(np.all(self.signed_volumes(x) > 0))

    def validate(self):
        vol = self.signed_volumes()
        bad = np.flatnonzero(vol <= 0)
        if bad.size:
            raise DegenerateElement(bad[0], det=vol[bad[0]] * math.factorial(self.dim))
        for i, c in enumerate(self.constraints):
            if c.kind == ON_SURFACE:
                n = c.normals(self.vertices[i])
                if np.any(np.linalg.norm(n, axis=-1) <= 1e-12):
                    raise ZeroSurfaceGradient(f"vertex {i}: zero surface gradient")

    def fixed_mask(self):
        return np.array([c.kind == FIXED for c in self.constraints])

    def free_mask(self):
        return np.array([c.kind == FREE for c in self.constraints])

    def total_volume(self):
        return float(self.volumes().sum())

    def diameter(self):
        lo, hi = self.vertices.min(axis=0), self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


# ---------------------------------------------------------------------------
# batched geometry


def edge_matrices(x, elements):
    """Edge matrices ``E_K = [x_1 - x_0, ..., x_d - x_0]`` as ``(N, d, d)``."""
    p = x[elements]
    return np.swapaxes(p[:, 1:, :] - p[:, :1, :], 1, 2)


def signed_volumes(x, elements):
    d = x.shape[1]
    return np.linalg.det(edge_matrices(x, elements)) / math.factorial(d)


def gradients_from_inverse(Einv):
    """Basis-function gradients ``(N, d+1, d)`` from inverse edge matrices.

    Rows 1..d are the rows of ``E_K^{-1}``; row 0 is minus their sum.
    """
    g0 = -Einv.sum(axis=1, keepdims=True)
    return np.concatenate([g0, Einv], axis=1)


def basis_gradients_all(x, elements):
    E = edge_matrices(x, elements)
    det = np.linalg.det(E)
    bad = np.flatnonzero(np.abs(det) <= EPS_VOL)
    if bad.size:
        raise DegenerateElement(bad[0], det=det[bad[0]])
    return gradients_from_inverse(np.linalg.inv(E))


def metric_altitudes(grads, Minv):
    """All ``d+1`` altitudes of each element measured in its metric.

    ``grads`` is ``(N, d+1, d)``, ``Minv`` is ``(N, d, d)`` (or ``(d, d)``).
    """
    q = np.einsum("kia,kab,kib->ki", grads, np.broadcast_to(Minv, grads.shape[:1] + Minv.shape[-2:]),
                  grads)
    return 1.0 / np.sqrt(q)


def _edge_pairs(d):
    return list(itertools.combinations(range(d + 1), 2))


def metric_diameters(x, elements, M=None):
    p = x[elements]
    pairs = _edge_pairs(x.shape[1])
    ev = np.stack([p[:, j] - p[:, i] for i, j in pairs], axis=1)
    if M is None:
        sq = np.einsum("kea,kea->ke", ev, ev)
    else:
        M = np.broadcast_to(M, (len(elements),) + M.shape[-2:])
        sq = np.einsum("kea,kab,keb->ke", ev, M, ev)
    return np.sqrt(sq.max(axis=1))


def euclidean_min_altitudes(x, elements):
    grads = basis_gradients_all(x, elements)
    return 1.0 / np.linalg.norm(grads, axis=2).max(axis=1)


def facet_areas(simplex):
    """Measures of the ``d+1`` facets of one simplex given as ``(d+1, d)``."""
    d = simplex.shape[1]
    areas = []
    for i in range(d + 1):
        pts = np.delete(simplex, i, axis=0)
        edges = pts[1:] - pts[0]
        gram = edges @ edges.T
        areas.append(math.sqrt(max(np.linalg.det(gram), 0.0)) / math.factorial(d - 1))
    return np.array(areas)


def in_diameter(simplex):
    """Diameter of the inscribed ball: ``2 d |K| / sum of facet measures``."""
    simplex = np.asarray(simplex, dtype=float)
    d = simplex.shape[1]
    vol = abs(np.linalg.det((simplex[1:] - simplex[0]).T)) / math.factorial(d)
    return 2.0 * d * vol / facet_areas(simplex).sum()


# ---------------------------------------------------------------------------
# per-element API


def _check_spd(M):
    M = np.asarray(M, dtype=float)
    if not np.allclose(M, np.swapaxes(M, -1, -2), rtol=1e-12, atol=1e-300):
        raise NonSPDMetric("metric is not symmetric")
    if np.any(np.linalg.eigvalsh(M) <= 0):
        raise NonSPDMetric("metric is not positive definite")
    return M


def edge_matrix(mesh, k):
    return edge_matrices(mesh.vertices, mesh.elements[k:k + 1])[0]


def element_volume(mesh, k, signed=False):
    det = np.linalg.det(edge_matrix(mesh, k)) / math.factorial(mesh.dim)
    return float(det if signed else abs(det))


def basis_gradients(mesh, k):
    """Gradients of the linear basis functions of element ``k``, ``(d+1, d)``."""
    E = edge_matrix(mesh, k)
    det = np.linalg.det(E)
    if abs(det) <= EPS_VOL:
        raise DegenerateElement(k, det=det)
    return gradients_from_inverse(np.linalg.inv(E)[None])[0]


def metric_min_altitude(mesh, k, M):
    M = _check_spd(M)
    grads = basis_gradients(mesh, k)
    return float(metric_altitudes(grads[None], np.linalg.inv(M)[None]).min())


def metric_diameter(mesh, k, M):
    M = _check_spd(M)
    return float(metric_diameters(mesh.vertices, mesh.elements[k:k + 1], M[None])[0])


# ---------------------------------------------------------------------------
# reference element and computational mesh


@dataclass(frozen=True)
class ReferenceSimplex:
    dim: int
    vertices: np.ndarray
    edge_matrix: np.ndarray
    altitude: float
    diameter: float
    in_diameter: float

    @property
    def volume(self):
        return abs(np.linalg.det(self.edge_matrix)) / math.factorial(self.dim)


def reference_equilateral(d):
    """Unitary equilateral simplex, centroid at the origin, first edge on axis 1."""
    if d == 2:
        v = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
    elif d == 3:
        v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, math.sqrt(3) / 2, 0.0],
                      [0.5, math.sqrt(3) / 6, math.sqrt(2.0 / 3.0)]])
    else:
        raise UnsupportedDimension(f"no reference simplex for d={d}")
    v = v - v.mean(axis=0)
    E = (v[1:] - v[0]).T
    altitude = math.sqrt(3) / 2 if d == 2 else math.sqrt(2.0 / 3.0)
    return ReferenceSimplex(d, v, E, altitude, 1.0, in_diameter(v))


MASTER_COPIES = "master_copies"
EXPLICIT = "explicit"


@dataclass
class ComputationalMesh:
    """Either ``N`` copies of ``N^{-1/d} K_hat`` or an explicit reference mesh."""

    mode: str
    n_elements: int
    dim: int
    mesh: SimplicialMesh | None = None
    _edges: np.ndarray = field(default=None, repr=False)

    @classmethod
    def master_copies(cls, n_elements, dim):
        ref = reference_equilateral(dim)
        Ehat = ref.edge_matrix * n_elements ** (-1.0 / dim)
        return cls(MASTER_COPIES, int(n_elements), dim, None, Ehat)

    @classmethod
    def explicit(cls, mesh):
        E = edge_matrices(mesh.vertices, mesh.elements)
        if np.any(np.linalg.det(E) <= 0):
            raise DegenerateElement(int(np.argmin(np.linalg.det(E))),
                                    message="computational mesh has non-positive elements")
        return cls(EXPLICIT, mesh.n_elements, mesh.dim, mesh, E)

    def edge_matrices(self):
        """``(N, d, d)`` for explicit meshes, a single ``(d, d)`` for master copies."""
        return self._edges

    def edge_matrix(self, k):
        if self.mode == MASTER_COPIES:
            if not 0 <= k < self.n_elements:
                raise IndexError(k)
            return self._edges
        return self._edges[k]

    def regularity(self):
        """``(rho_lo, rho_hi)`` with ``rho_lo N^{-1/d} <= rho_Kc`` and ``h_Kc <= rho_hi N^{-1/d}``."""
        if self.mode == MASTER_COPIES:
            ref = reference_equilateral(self.dim)
            return ref.in_diameter, ref.diameter
        scale = self.n_elements ** (1.0 / self.dim)
        x, el = self.mesh.vertices, self.mesh.elements
        rho = np.array([in_diameter(x[e]) for e in el])
        h = metric_diameters(x, el)
        return float(rho.min() * scale), float(h.max() * scale)


# ---------------------------------------------------------------------------
# structured meshes


def box_constraints(vertices, lo, hi, mode="slide", tol=1e-12):
    """Constraints for a mesh of an axis-aligned box.

    ``mode='fixed'`` pins every boundary vertex; ``'slide'`` lets vertices move
    within their face (or along a box edge in 3D); corners are always fixed.
    """
    vertices = np.asarray(vertices, dtype=float)
    d = vertices.shape[1]
    lo = np.broadcast_to(np.asarray(lo, dtype=float), (d,))
    hi = np.broadcast_to(np.asarray(hi, dtype=float), (d,))
    scale = tol * max(1.0, float(np.max(hi - lo)))
    on = (np.abs(vertices - lo) <= scale) | (np.abs(vertices - hi) <= scale)
    grads = [_axis_gradient(a, d) for a in range(d)]
    shared = {}
    out = []
    for row in on:
        n_faces = int(row.sum())
        if n_faces == 0:
            out.append(FREE_VERTEX)
        elif mode == "fixed" or n_faces >= d:
            out.append(FIXED_VERTEX)
        elif mode == "slide":
            key = tuple(np.flatnonzero(row))
            if key not in shared:
                shared[key] = BoundaryConstraint.on_surface(*(grads[a] for a in key))
            out.append(shared[key])
        else:
            raise ValueError(f"unknown boundary mode {mode!r}")
    return tuple(out)


def _orient(x, elements):
    vol = signed_volumes(x, elements)
    flip = vol < 0
    elements = elements.copy()
    elements[flip, 1], elements[flip, 2] = elements[flip, 2].copy(), elements[flip, 1].copy()
    return elements


def unit_square_mesh(n, lo=(0.0, 0.0), hi=(1.0, 1.0), boundary="slide"):
    """``n x n`` squares, each split into two triangles along the main diagonal."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    t = np.linspace(0.0, 1.0, n + 1)
    X, Y = np.meshgrid(lo[0] + t * (hi[0] - lo[0]), lo[1] + t * (hi[1] - lo[1]), indexing="ij")
    x = np.column_stack([X.ravel(), Y.ravel()])
    idx = np.arange((n + 1) ** 2).reshape(n + 1, n + 1)
    v00, v10 = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel()
    v01, v11 = idx[:-1, 1:].ravel(), idx[1:, 1:].ravel()
    el = np.concatenate([np.column_stack([v00, v10, v11]), np.column_stack([v00, v11, v01])])
    el = _orient(x, el)
    return SimplicialMesh(x, el, box_constraints(x, lo, hi, boundary))


def box_mesh(n, lo=(0.0, 0.0, 0.0), hi=(1.0, 1.0, 1.0), boundary="slide"):
    """``n^3`` cubes, each split into six tetrahedra sharing the main diagonal."""
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    t = np.linspace(0.0, 1.0, n + 1)
    axes = [lo[a] + t * (hi[a] - lo[a]) for a in range(3)]
    G = np.meshgrid(*axes, indexing="ij")
    x = np.column_stack([g.ravel() for g in G])
    idx = np.arange((n + 1) ** 3).reshape(n + 1, n + 1, n + 1)
    base = idx[:-1, :-1, :-1].ravel()
    stride = np.array([(n + 1) ** 2, n + 1, 1])
    tets = []
    for perm in itertools.permutations(range(3)):
        offs = [0]
        acc = 0
        for a in perm:
            acc += stride[a]
            offs.append(acc)
        tets.append(np.column_stack([base + o for o in offs]))
    el = _orient(x, np.concatenate(tets))
    return SimplicialMesh(x, el, box_constraints(x, lo, hi, boundary))


def perturb_mesh(mesh, amplitude, seed=0):
    """Move every free vertex by a uniform random offset in ``[-amplitude, amplitude]^d``.

    Constrained vertices stay put. The result may contain inverted elements.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    rng = np.random.default_rng(seed)
    offset = rng.uniform(-amplitude, amplitude, size=mesh.vertices.shape)
    offset[~mesh.free_mask()] = 0.0
    return mesh.with_vertices(mesh.vertices + offset)


def mesh_spacing(mesh):
    """Mean edge length, used as the length scale of a mesh."""
    x = mesh.vertices
    pairs = _edge_pairs(mesh.dim)
    p = x[mesh.elements]
    lengths = np.concatenate([np.linalg.norm(p[:, j] - p[:, i], axis=1) for i, j in pairs])
    return float(lengths.mean())


def vertex_patches(elements, n_vertices):
    """For each vertex, the array of elements containing it."""
    flat = elements.ravel()
    order = np.argsort(flat, kind="stable")
    counts = np.bincount(flat, minlength=n_vertices)
    splits = np.cumsum(counts)[:-1]
    owners = order // elements.shape[1]
    return np.split(owners, splits)


def dihedral_angles(x, elements):
    """All six interior dihedral angles of each tetrahedron, in degrees, ``(N, 6)``."""
    if x.shape[1] != 3:
        raise UnsupportedDimension("dihedral angles are defined for tetrahedra")
    grads = basis_gradients_all(x, elements)
    out = []
    for i, j in _edge_pairs(3):
        # the edge opposite to faces i and j; angle between faces = pi - angle(grad_i, grad_j)
        gi, gj = grads[:, i], grads[:, j]
        c = np.einsum("ka,ka->k", gi, gj) / (np.linalg.norm(gi, axis=1) * np.linalg.norm(gj, axis=1))
        out.append(np.degrees(np.pi - np.arccos(np.clip(c, -1.0, 1.0))))
    return np.column_stack(out)
