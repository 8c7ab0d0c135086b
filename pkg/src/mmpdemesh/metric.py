"""Metric tensor fields and the Hessian-based adaptation metric."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from .errors import NonSPDMetric, SingularPatch
from .mesh import edge_matrices, signed_volumes

log = logging.getLogger(__name__)

ALPHA_MIN, ALPHA_MAX = 1e-8, 1e8
EPS_RHS = 1e-14


class MetricField:
    """A symmetric positive definite tensor field ``M(x)``.

    Subclasses implement ``evaluate(points) -> (n, d, d)``.
    """

    kind = "abstract"

    def __init__(self, dim):
        self.dim = int(dim)

    def evaluate(self, points):
        raise NotImplementedError

    def __call__(self, points):
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self.evaluate(points[None])[0]
        return self.evaluate(points)

    def scaled(self, c):
        return ScaledMetric(self, c)


class IdentityMetric(MetricField):
    kind = "identity"

    def evaluate(self, points):
        return np.broadcast_to(np.eye(self.dim), (len(points), self.dim, self.dim)).copy()


class AnalyticMetric(MetricField):
    """Wraps ``func(points (n, d)) -> (n, d, d)``."""

    kind = "analytic"

    def __init__(self, func, dim):
        super().__init__(dim)
        self.func = func

    def evaluate(self, points):
        out = np.asarray(self.func(points), dtype=float)
        return np.broadcast_to(out, (len(points), self.dim, self.dim)).copy()

    @classmethod
    def constant(cls, M):
        M = np.asarray(M, dtype=float)
        return cls(lambda pts: M, M.shape[0])


class ScaledMetric(MetricField):
    kind = "scaled"

    def __init__(self, base, c):
        super().__init__(base.dim)
        self.base, self.c = base, float(c)

    def evaluate(self, points):
        return self.c * self.base.evaluate(points)


class NodalMetric(MetricField):
    """Per-vertex tensors on a fixed background mesh, linearly interpolated.

    Points are located by checking the elements whose centroids are nearest;
    points marginally outside the background mesh use clipped barycentric
    weights of the closest candidate element.
    """

    kind = "nodal"

    def __init__(self, mesh, values, n_candidates=None):
        super().__init__(mesh.dim)
        self.mesh = mesh
        self.values = np.asarray(values, dtype=float)
        if self.values.shape != (mesh.n_vertices, self.dim, self.dim):
            raise ValueError("need one d x d tensor per background vertex")
        x, el = mesh.vertices, mesh.elements
        self._x0 = x[el[:, 0]]
        self._Einv = np.linalg.inv(edge_matrices(x, el))
        self._tree = cKDTree(x[el].mean(axis=1))
        self._k = min(n_candidates or (8 if self.dim == 2 else 24), mesh.n_elements)
        self._cache_key = None
        self._cache_val = None

    def barycentric(self, points):
        """Element index and barycentric weights ``(n, d+1)`` for each point."""
        points = np.asarray(points, dtype=float)
        _, cand = self._tree.query(points, k=self._k)
        cand = cand.reshape(len(points), -1)
        rel = points[:, None, :] - self._x0[cand]
        lam = np.einsum("nkab,nkb->nka", self._Einv[cand], rel)
        lam = np.concatenate([1.0 - lam.sum(axis=2, keepdims=True), lam], axis=2)
        best = lam.min(axis=2).argmax(axis=1)
        rows = np.arange(len(points))
        w = np.clip(lam[rows, best], 0.0, None)
        w /= w.sum(axis=1, keepdims=True)
        return cand[rows, best], w

    def evaluate(self, points):
        points = np.asarray(points, dtype=float)
        key = (points.shape, points.tobytes())
        if self._cache_key == key:
            return self._cache_val.copy()
        elem, w = self.barycentric(points)
        vals = np.einsum("nj,njab->nab", w, self.values[self.mesh.elements[elem]])
        self._cache_key, self._cache_val = key, vals
        return vals.copy()


def check_spd(M):
    M = np.asarray(M)
    if np.any(np.linalg.eigvalsh(M)[..., 0] <= 0):
        raise NonSPDMetric("metric has a non-positive eigenvalue")
    return M


def element_metrics(field, x, elements):
    """Vertex values ``(Nv, d, d)`` and element averages ``M_K`` ``(N, d, d)``."""
    Mv = field(x)
    return Mv, Mv[elements].mean(axis=1)


def element_metric(field, mesh, k):
    """``M_K`` as the average of ``M`` over the vertices of element ``k``."""
    Mv = field(mesh.vertices[mesh.elements[k]])
    return check_spd(Mv.mean(axis=0))


# ---------------------------------------------------------------------------
# Hessian recovery


@dataclass
class NodalHessianField:
    mesh: object
    values: np.ndarray


def _vertex_adjacency(mesh):
    el = mesh.elements
    n = mesh.n_vertices
    rows = np.repeat(el, el.shape[1], axis=1).ravel()
    cols = np.tile(el, (1, el.shape[1])).ravel()
    A = sparse.coo_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(n, n)).tocsr()
    A.data[:] = 1
    return A


def _quadratic_design(dx):
    d = dx.shape[1]
    cols = [np.ones(len(dx))] + [dx[:, a] for a in range(d)]
    pairs = [(a, b) for a in range(d) for b in range(a, d)]
    cols += [dx[:, a] * dx[:, b] for a, b in pairs]
    return np.column_stack(cols), pairs


def recover_hessian(mesh, u):
    """Least-squares quadratic fit of ``u`` on each vertex patch.

    The patch starts at the vertex and its edge neighbours and is widened by
    one ring (at most twice) while the fit is rank deficient.
    """
    u = np.asarray(u, dtype=float)
    x = mesh.vertices
    d = mesh.dim
    n_coef = (d + 1) * (d + 2) // 2
    A1 = _vertex_adjacency(mesh)
    rings = [A1]
    H = np.zeros((mesh.n_vertices, d, d))
    for i in range(mesh.n_vertices):
        for level in range(3):
            while len(rings) <= level:
                R = (rings[-1] @ A1).tocsr()
                R.data[:] = 1
                rings.append(R)
            nbrs = rings[level].indices[rings[level].indptr[i]:rings[level].indptr[i + 1]]
            if len(nbrs) < n_coef:
                continue
            dx = x[nbrs] - x[i]
            scale = np.abs(dx).max()
            A, pairs = _quadratic_design(dx / scale)
            coef, _, rank, _ = np.linalg.lstsq(A, u[nbrs], rcond=None)
            if rank == n_coef:
                break
        else:
            raise SingularPatch(f"vertex {i}: quadratic fit is rank deficient")
        second = coef[1 + d:] / scale ** 2
        for c, (a, b) in zip(second, pairs):
            if a == b:
                H[i, a, a] = 2.0 * c
            else:
                H[i, a, b] = H[i, b, a] = c
    return NodalHessianField(mesh, H)


def absolute_spd(H):
    """Replace the eigenvalues of symmetric ``H`` by their absolute values."""
    H = np.asarray(H, dtype=float)
    w, V = np.linalg.eigh(H)
    return np.einsum("...ij,...j,...kj->...ik", V, np.abs(w), V)


# ---------------------------------------------------------------------------
# regularisation parameter and adaptation metric


@dataclass(frozen=True)
class RegularizationAlpha:
    value: float
    clamped: bool = False
    degenerate: bool = False
    residual: float = 0.0


def _vertex_integral(mesh, f):
    vol = np.abs(signed_volumes(mesh.vertices, mesh.elements))
    return float(np.sum(vol * f[mesh.elements].mean(axis=1)))


def _adaptation_tensors(absH, alpha):
    d = absH.shape[-1]
    A = alpha * np.eye(d) + absH
    detA = np.linalg.det(A)
    return detA[..., None, None] ** (-1.0 / 6.0) * A, detA


def solve_regularization_alpha(mesh, hessians, iterations=200, rtol=1e-12):
    """Pick ``alpha`` so that ``int sqrt(det M) = 2 int det(|H|)^(1/3)``.

    Bisection on ``log(alpha)`` over ``[1e-8, 1e8]``; the left side is
    increasing in ``alpha``.
    """
    absH = absolute_spd(hessians.values)
    d = absH.shape[-1]
    rhs = 2.0 * _vertex_integral(mesh, np.clip(np.linalg.det(absH), 0.0, None) ** (1.0 / 3.0))
    if rhs <= EPS_RHS:
        log.warning("Hessian integral vanishes; using alpha = 1")
        return RegularizationAlpha(1.0, degenerate=True)

    def residual(alpha):
        detA = np.linalg.det(alpha * np.eye(d) + absH)
        # det(M) = det(A)^(1 - d/6)
        return _vertex_integral(mesh, detA ** ((1.0 - d / 6.0) / 2.0)) - rhs

    lo, hi = np.log(ALPHA_MIN), np.log(ALPHA_MAX)
    if residual(ALPHA_MIN) >= 0:
        return RegularizationAlpha(ALPHA_MIN, clamped=True, residual=residual(ALPHA_MIN) / rhs)
    if residual(ALPHA_MAX) <= 0:
        return RegularizationAlpha(ALPHA_MAX, clamped=True, residual=residual(ALPHA_MAX) / rhs)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if residual(np.exp(mid)) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo < rtol:
            break
    alpha = float(np.exp(0.5 * (lo + hi)))
    return RegularizationAlpha(alpha, residual=residual(alpha) / rhs)


def build_adaptation_metric(hessians, alpha_reg):
    """``M = det(alpha I + |H|)^(-1/6) (alpha I + |H|)`` at every vertex."""
    alpha = getattr(alpha_reg, "value", alpha_reg)
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    M, _ = _adaptation_tensors(absolute_spd(hessians.values), alpha)
    return NodalMetric(hessians.mesh, M)


def estimate_bounds(field, mesh):
    """``(m_lo, m_hi)``: extreme eigenvalues over vertex and centroid samples."""
    x = mesh.vertices
    pts = np.concatenate([x, x[mesh.elements].mean(axis=1)])
    w = np.linalg.eigvalsh(field(pts))
    m_lo, m_hi = float(w[:, 0].min()), float(w[:, -1].max())
    if m_lo <= 0:
        raise NonSPDMetric(f"metric lower bound {m_lo:.3e} is not positive")
    return m_lo, m_hi
