"""Lemma checks, nonsingularity floors, quality statistics and scaling studies."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NotCoercive
from .functionals import balance_p, coercivity_constants
from .integrate import integrate
from .mesh import (SimplicialMesh, basis_gradients_all, box_mesh, dihedral_angles, in_diameter,
                   metric_altitudes, metric_diameters, perturb_mesh, reference_equilateral,
                   signed_volumes, unit_square_mesh)
from .metric import AnalyticMetric, IdentityMetric, estimate_bounds
from .mmpde import MmpdeProblem, assemble_velocities, discrete_functional, fd_gradient

LEMMA_SLACK = 1e-9


# ---------------------------------------------------------------------------
# random instances


def random_simplex(rng, d, min_det=None):
    """Vertices uniform in the unit cube, redrawn until ``|det E| >= 1e-3 / d!``."""
    min_det = 1e-3 / math.factorial(d) if min_det is None else min_det
    while True:
        v = rng.uniform(0.0, 1.0, size=(d + 1, d))
        if abs(np.linalg.det((v[1:] - v[0]).T)) >= min_det:
            return v


def random_spd(rng, d, shift=1e-3):
    A = rng.standard_normal((d, d))
    return A.T @ A + shift * np.eye(d)


def _simplex_edges(v):
    return (v[1:] - v[0]).T


def _min_metric_altitude(v, M):
    E = _simplex_edges(v)
    Einv = np.linalg.inv(E)
    grads = np.vstack([-Einv.sum(axis=0), Einv])
    return float(metric_altitudes(grads[None], np.linalg.inv(M)[None]).min())


def _metric_diameter(v, M):
    return float(metric_diameters(v, np.arange(len(v))[None], M[None])[0])


# ---------------------------------------------------------------------------
# lemma checks


@dataclass
class LemmaReport:
    """Outcome of a sampled check of a two-sided bound ``lower <= middle <= upper``.

    Margins are relative: ``middle / lower - 1`` and ``1 - middle / upper``;
    a draw is a violation when either margin is below ``-slack``.
    """

    name: str
    dim: int
    samples: int
    violations: int
    worst_lower: float
    worst_upper: float
    slack: float = LEMMA_SLACK
    failures: list = field(default_factory=list)

    @property
    def ok(self):
        return self.violations == 0

    def summary(self):
        return (f"{self.name} d={self.dim}: {self.violations} violations in {self.samples} draws "
                f"(worst margins {self.worst_lower:.3e}, {self.worst_upper:.3e})")


def _lemma_report(name, d, lower, middle, upper, slack):
    lower, middle, upper = map(np.asarray, (lower, middle, upper))
    m_lo = middle / lower - 1.0
    m_hi = 1.0 - middle / upper
    bad = np.flatnonzero((m_lo < -slack) | (m_hi < -slack))
    return LemmaReport(name, d, len(middle), int(bad.size), float(m_lo.min()),
                       float(m_hi.min()), slack, bad[:10].tolist())


def check_lemma_fk2(samples=10_000, seed=0, d=2, slack=LEMMA_SLACK):
    """``a~^2/a^2 <= ||F^-1 M^-1 F^-T|| <= d^2 a~^2/a^2`` with ``F = E_K E~^-1``.

    ``K~`` is the unitary equilateral simplex, ``K`` and ``M`` are random;
    draw ``i`` uses the generator seeded with ``(seed, i)``.
    """
    ref = reference_equilateral(d)
    Et, at = ref.edge_matrix, ref.altitude
    lower, middle, upper = [], [], []
    for i in range(samples):
        rng = np.random.default_rng((seed, i))
        v = random_simplex(rng, d)
        M = random_spd(rng, d)
        Finv = Et @ np.linalg.inv(_simplex_edges(v))
        val = np.linalg.norm(Finv @ np.linalg.inv(M) @ Finv.T, 2)
        a = _min_metric_altitude(v, M)
        lower.append(at ** 2 / a ** 2)
        middle.append(val)
        upper.append(d ** 2 * at ** 2 / a ** 2)
    return _lemma_report("FK-2", d, lower, middle, upper, slack)


def check_lemma_fk1(samples=10_000, seed=0, d=2, slack=LEMMA_SLACK):
    """``h_{K,M}^2/h~^2 <= ||F^T M F|| <= h_{K,M}^2/rho~^2`` for random ``K``, ``K~``, ``M``."""
    lower, middle, upper = [], [], []
    for i in range(samples):
        rng = np.random.default_rng((seed, i))
        v = random_simplex(rng, d)
        vt = random_simplex(rng, d)
        M = random_spd(rng, d)
        F = _simplex_edges(v) @ np.linalg.inv(_simplex_edges(vt))
        val = np.linalg.norm(F.T @ M @ F, 2)
        h = _metric_diameter(v, M)
        ht = _metric_diameter(vt, np.eye(d))
        rho = in_diameter(vt)
        lower.append(h ** 2 / ht ** 2)
        middle.append(val)
        upper.append(h ** 2 / rho ** 2)
    return _lemma_report("FK-1", d, lower, middle, upper, slack)


# ---------------------------------------------------------------------------
# nonsingularity floors


@dataclass(frozen=True)
class TheoremBounds:
    C1: float
    C2: float
    altitude_floor: float
    volume_floor: float
    inputs: dict


def theorem_floors(problem, initial_I_h=None, bounds=None):
    """Lower bounds on metric altitudes and volumes along the mesh trajectory.

    ``C1 = (alpha a^{2q} / (d! h^{2q} (beta |Omega| + I_h(0))))^{1/(2q-d)}`` and
    ``C2 = C1^d / d!``, with ``a``, ``h`` the altitude and diameter of the
    unitary equilateral simplex. ``bounds`` defaults to the metric bounds
    sampled on the initial mesh.
    """
    mesh = problem.mesh
    d = mesh.dim
    spec = problem.functional
    if bounds is None:
        bounds = estimate_bounds(problem.metric, mesh)
    coerc = coercivity_constants(spec, bounds, d)
    if coerc is None:
        raise NotCoercive(f"{spec.kind} functional (q = {spec.exponent(d):g}) is not coercive "
                          f"with q > d/2 in {d}D")
    if initial_I_h is None:
        initial_I_h = discrete_functional(problem)
    q, alpha, beta = coerc.q, coerc.alpha, coerc.beta
    _, m_hi = bounds
    ref = reference_equilateral(d)
    a_hat, h_hat = ref.altitude, ref.diameter
    rho_lo, _ = problem.computational.regularity()
    N = mesh.n_elements
    omega = mesh.total_volume()
    s = 2.0 * q - d
    C1 = (alpha * a_hat ** (2 * q)
          / (math.factorial(d) * h_hat ** (2 * q) * (beta * omega + initial_I_h))) ** (1.0 / s)
    C2 = C1 ** d / math.factorial(d)
    alt = C1 * rho_lo ** (2 * q / s) * m_hi ** (-d / (2 * s)) * N ** (-2 * q / (d * s))
    vol = (C2 * rho_lo ** (2 * q * d / s) * m_hi ** (-d * d / (2 * s) - d / 2.0)
           * N ** (-2 * q / s))
    inputs = dict(q=q, alpha_c=alpha, beta_c=beta, m_lo=bounds[0], m_hi=m_hi, rho_lo=rho_lo,
                  N=N, omega=omega, I_h0=float(initial_I_h), a_hat=a_hat, h_hat=h_hat)
    return TheoremBounds(C1, C2, alt, vol, inputs)


def element_metric_altitudes(metric, x, elements):
    """Minimum altitude of every element in its vertex-averaged metric ``M_K``."""
    MK = metric(x)[elements].mean(axis=1)
    grads = basis_gradients_all(x, elements)
    return metric_altitudes(grads, np.linalg.inv(MK)).min(axis=1)


class FloorMonitor:
    """Integration observer recording how close each mesh comes to the floors.

    ``ratios`` holds ``(t, min a_{K,M} / altitude_floor, min |K| / volume_floor)``.
    """

    def __init__(self, problem, bounds):
        self.problem = problem
        self.bounds = bounds
        self.ratios = []

    def __call__(self, t, mesh):
        x, el = mesh.vertices, mesh.elements
        a = element_metric_altitudes(self.problem.metric, x, el).min()
        v = signed_volumes(x, el).min()
        self.ratios.append((t, a / self.bounds.altitude_floor, v / self.bounds.volume_floor))

    @property
    def violations(self):
        return [r for r in self.ratios if r[1] < 1.0 or r[2] < 1.0]

    @property
    def ok(self):
        return not self.violations

    def worst(self):
        r = np.array(self.ratios)
        return float(r[:, 1].min()), float(r[:, 2].min())


# ---------------------------------------------------------------------------
# quality statistics


DIHEDRAL_BINS = np.linspace(0.0, 180.0, 19)


@dataclass
class QualityReport:
    n_elements: int
    volume_min: float
    volume_max: float
    metric_altitude_min: float
    equidistribution_min: float
    equidistribution_max: float
    dihedral_counts: np.ndarray = None
    dihedral_edges: np.ndarray = None
    dihedral_small: int = None
    dihedral_large: int = None

    @property
    def volume_ratio(self):
        return self.volume_max / self.volume_min

    def as_dict(self):
        out = dict(n_elements=self.n_elements, volume_min=self.volume_min,
                   volume_max=self.volume_max, volume_ratio=self.volume_ratio,
                   metric_altitude_min=self.metric_altitude_min,
                   equidistribution_min=self.equidistribution_min,
                   equidistribution_max=self.equidistribution_max)
        if self.dihedral_counts is not None:
            out["dihedral_small"] = self.dihedral_small
            out["dihedral_large"] = self.dihedral_large
        return out

    def to_text(self):
        lines = [f"{k} = {v:.10g}" if isinstance(v, float) else f"{k} = {v}"
                 for k, v in self.as_dict().items()]
        if self.dihedral_counts is not None:
            lines.append("# dihedral histogram (degrees)")
            for lo, hi, c in zip(self.dihedral_edges[:-1], self.dihedral_edges[1:],
                                 self.dihedral_counts):
                lines.append(f"[{lo:g}, {hi:g}) {int(c)}")
        return "\n".join(lines) + "\n"


def equidistribution_ratios(metric, mesh):
    """``r_K = |K| sqrt(det M_K) N / sigma_h`` with ``sigma_h = sum |K| sqrt(det M_K)``."""
    x, el = mesh.vertices, mesh.elements
    MK = metric(x)[el].mean(axis=1)
    w = mesh.volumes() * np.sqrt(np.linalg.det(MK))
    return w * len(w) / w.sum()


def dihedral_counts(mesh, small=20.0, large=150.0):
    """Number of dihedral angles in ``[0, small)`` and in ``(large, 180]``."""
    a = dihedral_angles(mesh.vertices, mesh.elements).ravel()
    return int(np.count_nonzero(a < small)), int(np.count_nonzero(a > large))


def quality_report(mesh, metric=None, bins=DIHEDRAL_BINS):
    metric = IdentityMetric(mesh.dim) if metric is None else metric
    x, el = mesh.vertices, mesh.elements
    vol = mesh.volumes()
    r = equidistribution_ratios(metric, mesh)
    rep = QualityReport(mesh.n_elements, float(vol.min()), float(vol.max()),
                        float(element_metric_altitudes(metric, x, el).min()),
                        float(r.min()), float(r.max()))
    if mesh.dim == 3:
        a = dihedral_angles(x, el).ravel()
        counts, edges = np.histogram(a, bins=bins, range=(0.0, 180.0))
        rep.dihedral_counts, rep.dihedral_edges = counts, edges
        rep.dihedral_small, rep.dihedral_large = dihedral_counts(mesh)
    return rep


# ---------------------------------------------------------------------------
# gradient check


def random_test_problem(d, seed, functional, metric="identity", n=None, amplitude=0.3):
    """A perturbed structured mesh with all vertices free, for gradient checks.

    ``metric`` is ``"identity"`` or ``"affine"``; the latter is a random SPD
    field ``M(x) = S_0 + sum_a x_a S_a`` on the unit box.
    """
    rng = np.random.default_rng((seed, d))
    n = n or (4 if d == 2 else 3)
    base = unit_square_mesh(n) if d == 2 else box_mesh(n)
    free = SimplicialMesh(base.vertices, base.elements)
    for attempt in range(50):
        mesh = perturb_mesh(free, amplitude / n, (seed, d, attempt))
        if mesh.is_nonsingular():
            break
    else:
        raise RuntimeError("could not draw a nonsingular mesh")
    if metric == "identity":
        field = None
    elif metric == "affine":
        S0 = random_spd(rng, d, shift=1.0)
        S = rng.uniform(-0.2, 0.2, size=(d, d, d))
        S = 0.5 * (S + np.swapaxes(S, 1, 2))

        def func(pts, S0=S0, S=S):
            return S0 + np.einsum("na,aij->nij", pts, S)

        field = AnalyticMetric(func, d)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return MmpdeProblem(mesh, field, functional)


def gradient_check(problem, h=1e-6):
    """Relative max-norm gap between free-vertex velocities and ``-(P/tau) dI_h/dx``."""
    x = problem.mesh.vertices
    free = problem.mesh.free_mask()
    vel = assemble_velocities(problem, constrained=False)
    P = balance_p(problem.functional, problem.metric(x))
    ref = -(P / problem.tau)[:, None] * fd_gradient(problem, h)
    ref, vel = ref[free], vel[free]
    return float(np.abs(vel - ref).max() / np.abs(ref).max())


# ---------------------------------------------------------------------------
# scaling study


@dataclass
class StudyRow:
    n: int
    N: int
    K_min: float
    I_h_final: float
    volume_floor: float
    slope_running: float
    reason: str


@dataclass
class ScalingStudy:
    rows: list
    slope: float

    COLUMNS = ("N", "K_min", "I_h_final", "volume_floor", "slope_running")

    def to_csv(self):
        buf = io.StringIO()
        buf.write(",".join(self.COLUMNS) + "\n")
        for r in self.rows:
            buf.write(f"{r.N},{r.K_min!r},{r.I_h_final!r},{r.volume_floor!r},{r.slope_running!r}\n")
        return buf.getvalue()


def loglog_slope(N, K):
    return float(np.polyfit(np.log(N), np.log(K), 1)[0])


def scaling_study(scenario, sizes, config=None, **build_kw):
    """Run ``scenario`` at grid resolutions ``sizes`` and fit ``log K_min`` against ``log N``.

    ``K_min`` is the smallest element volume over the whole trajectory.
    ``config`` entries override the scenario's integrator settings.
    """
    from .scenarios import build

    sizes = [int(s) for s in sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError("sizes must be increasing")
    overrides = dict(config or {})
    rows = []
    for n in sizes:
        sc = build(scenario, n=n, **build_kw, **overrides)
        res = integrate(sc.problem, sc.config)
        k_min = float(res.trace.column("K_min").min())
        try:
            floor = theorem_floors(sc.problem, res.trace.rows[0][1]).volume_floor
        except NotCoercive:
            floor = float("nan")
        N = sc.problem.mesh.n_elements
        rows.append(StudyRow(n, N, k_min, res.limit, floor, float("nan"), res.reason))
        if len(rows) > 1:
            rows[-1].slope_running = loglog_slope([r.N for r in rows], [r.K_min for r in rows])
    slope = rows[-1].slope_running if len(rows) > 1 else float("nan")
    return ScalingStudy(rows, slope)
