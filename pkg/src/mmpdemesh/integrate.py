"""Energy-decreasing time integration of the MMPDE vertex system."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateElement
from .mesh import euclidean_min_altitudes, signed_volumes
from .mmpde import assemble_velocities, discrete_functional

log = logging.getLogger(__name__)

EULER = "euler"
RK2 = "rk2"

CONVERGED = "Converged"
TIME_LIMIT = "TimeLimit"
DT_UNDERFLOW = "DtUnderflow"

ENERGY_INCREASE = "EnergyIncrease"
ELEMENT_INVERSION = "ElementInversion"
EXCESSIVE_DISPLACEMENT = "ExcessiveDisplacement"
LOCAL_ERROR = "LocalError"


@dataclass
class IntegratorConfig:
    scheme: str = EULER
    dt_init: float = 1e-3
    dt_min: float = 1e-12
    dt_max: float = 1.0
    energy_backtrack_factor: float = 0.5
    growth_factor: float = 1.2
    growth_after: int = 5
    t_end: float = 1.0
    stop_rel_tol: float = 1e-8
    stop_window: int = 10
    guard_fraction: float = 0.4
    rk2_tol: float = 1e-3

    def __post_init__(self):
        if self.scheme not in (EULER, RK2):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if not self.dt_min <= self.dt_init <= self.dt_max:
            raise ValueError("need dt_min <= dt_init <= dt_max")
        if self.stop_rel_tol <= 0:
            raise ValueError("stop_rel_tol must be positive")
        if not 0 < self.energy_backtrack_factor < 1:
            raise ValueError("energy_backtrack_factor must lie in (0, 1)")
        if self.stop_window < 1:
            raise ValueError("stop_window must be at least 1")


@dataclass
class State:
    """Vertex positions with cached metric values, energy and velocity."""

    x: np.ndarray
    energy: float
    velocity: np.ndarray
    Mv: np.ndarray

    @classmethod
    def at(cls, problem, x):
        Mv = problem.metric(x)
        energy = discrete_functional(problem, x, Mv=Mv)
        vel = assemble_velocities(problem, x, Mv=Mv)
        return cls(np.array(x, dtype=float), energy, vel, Mv)


@dataclass
class StepOutcome:
    accepted: bool
    state: State | None = None
    reason: str | None = None

    @property
    def x(self):
        return None if self.state is None else self.state.x

    @property
    def energy(self):
        return None if self.state is None else self.state.energy


def _vertex_min_altitude(problem, x):
    alt = euclidean_min_altitudes(x, problem.mesh.elements)
    out = np.full(len(x), np.inf)
    el = problem.mesh.elements
    np.minimum.at(out, el.ravel(), np.repeat(alt, el.shape[1]))
    return out


def _trial(problem, state, x_new, disp, guard_fraction):
    limit = guard_fraction * _vertex_min_altitude(problem, state.x)
    if np.any(np.linalg.norm(disp, axis=1) > limit):
        return StepOutcome(False, reason=EXCESSIVE_DISPLACEMENT)
    if np.any(signed_volumes(x_new, problem.mesh.elements) <= 0):
        return StepOutcome(False, reason=ELEMENT_INVERSION)
    Mv = problem.metric(x_new)
    try:
        energy = discrete_functional(problem, x_new, Mv=Mv)
    except DegenerateElement:
        return StepOutcome(False, reason=ELEMENT_INVERSION)
    if not energy <= state.energy:
        return StepOutcome(False, reason=ENERGY_INCREASE)
    vel = assemble_velocities(problem, x_new, Mv=Mv)
    return StepOutcome(True, State(x_new, energy, vel, Mv))


def step(problem, state, dt, config=None):
    """Advance one step of size ``dt``; rejected steps leave ``state`` untouched.

    Acceptance requires a non-increasing ``I_h``, positive element volumes and
    vertex displacements below ``guard_fraction`` of the minimum altitude of
    their patch.
    """
    config = config or IntegratorConfig(dt_init=dt, dt_max=max(dt, 1.0), dt_min=min(dt, 1e-12))
    if not np.any(state.velocity):
        return StepOutcome(True, state)
    if config.scheme == EULER:
        disp = dt * state.velocity
        return _trial(problem, state, state.x + disp, disp, config.guard_fraction)

    half = 0.5 * dt * state.velocity
    x_mid = state.x + half
    if np.any(signed_volumes(x_mid, problem.mesh.elements) <= 0):
        return StepOutcome(False, reason=ELEMENT_INVERSION)
    k2 = assemble_velocities(problem, x_mid)
    disp = dt * k2
    scale = float(np.min(_vertex_min_altitude(problem, state.x)))
    if dt * np.max(np.abs(k2 - state.velocity)) > config.rk2_tol * scale:
        return StepOutcome(False, reason=LOCAL_ERROR)
    return _trial(problem, state, state.x + disp, disp, config.guard_fraction)


@dataclass
class EnergyTrace:
    rows: list = field(default_factory=list)

    COLUMNS = ("t", "I_h", "K_min", "grad_inf", "dt")

    def append(self, t, energy, k_min, grad_inf, dt):
        self.rows.append((float(t), float(energy), float(k_min), float(grad_inf), float(dt)))

    def column(self, name):
        j = self.COLUMNS.index(name)
        return np.array([r[j] for r in self.rows])

    def __len__(self):
        return len(self.rows)

    def is_monotone(self, rtol=1e-12):
        e = self.column("I_h")
        return bool(np.all(e[1:] <= e[:-1] + rtol * np.abs(e[:-1])))

    def to_csv(self, termination=None):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([repr(v) for v in r])
        if termination is not None:
            buf.write(f"# termination={termination}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text):
        trace = cls()
        termination = None
        reader = csv.reader(line for line in text.splitlines() if line.strip())
        for row in reader:
            if row[0].startswith("#"):
                termination = row[0].split("=", 1)[1].strip()
                continue
            if row[0] == "t":
                continue
            trace.append(*map(float, row))
        return trace, termination


@dataclass
class IntegrationResult:
    mesh: object
    trace: EnergyTrace
    reason: str
    state: State
    steps: int
    rejected: int

    @property
    def limit(self):
        """Last recorded ``I_h``, the running estimate of its limit."""
        return self.trace.rows[-1][1]


def _record(trace, problem, t, state, dt):
    vol = signed_volumes(state.x, problem.mesh.elements)
    trace.append(t, state.energy, vol.min(), np.abs(state.velocity).max(), dt)


def integrate(problem, config=None, observer=None):
    """Integrate until the energy stalls, ``t_end`` is reached or ``dt`` underflows.

    ``observer(t, mesh)`` is called on the initial and every accepted mesh.
    """
    config = config or IntegratorConfig()
    mesh0 = problem.mesh
    if not mesh0.is_nonsingular():
        raise DegenerateElement(int(np.argmin(mesh0.signed_volumes())),
                                message="initial mesh has non-positive elements")
    state = State.at(problem, mesh0.vertices)
    trace = EnergyTrace()
    t, dt = 0.0, config.dt_init
    _record(trace, problem, t, state, 0.0)
    if observer is not None:
        observer(t, mesh0)
    energies = [state.energy]
    streak = steps = rejected = 0
    reason = TIME_LIMIT
    while t < config.t_end * (1 - 1e-14):
        h = min(dt, config.t_end - t)
        out = step(problem, state, h, config)
        if not out.accepted:
            rejected += 1
            streak = 0
            dt = h * config.energy_backtrack_factor
            if dt < config.dt_min:
                reason = DT_UNDERFLOW
                log.warning("time step underflow at t=%.6g (%s)", t, out.reason)
                break
            continue
        state = out.state
        t += h
        steps += 1
        streak += 1
        _record(trace, problem, t, state, h)
        energies.append(state.energy)
        if observer is not None:
            observer(t, mesh0.with_vertices(state.x))
        if streak >= config.growth_after:
            dt = min(dt * config.growth_factor, config.dt_max)
            streak = 0
        if len(energies) > config.stop_window:
            drop = energies[-1 - config.stop_window] - energies[-1]
            if drop <= config.stop_rel_tol * abs(energies[-1]):
                reason = CONVERGED
                break
    return IntegrationResult(mesh0.with_vertices(state.x), trace, reason, state, steps, rejected)
