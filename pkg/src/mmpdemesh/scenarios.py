"""Builtin test problems: 2D/3D smoothing and Hessian-based adaptation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .functionals import FunctionalSpec
from .integrate import IntegratorConfig
from .mesh import box_mesh, perturb_mesh, unit_square_mesh
from .metric import (IdentityMetric, build_adaptation_metric, recover_hessian,
                     solve_regularization_alpha)
from .mmpde import MmpdeProblem

SCENARIOS = ("smooth2d", "sinewave", "smooth3d", "ninespheres", "custom")


def sine_wave(x):
    """``tanh(-20 (y - 0.5 - 0.25 sin(2 pi x)))``."""
    x = np.atleast_2d(x)
    return np.tanh(-20.0 * (x[:, 1] - 0.5 - 0.25 * np.sin(2.0 * np.pi * x[:, 0])))


NINE_SPHERE_CENTERS = np.array([[0.0, 0.0, 0.0]] + [list(c) for c in itertools.product(
    (0.5, -0.5), repeat=3)])


def nine_spheres(x):
    """Sum of nine ``tanh(30 (|x - c|^2 - 0.1875))`` fronts."""
    x = np.atleast_2d(x)
    r2 = ((x[:, None, :] - NINE_SPHERE_CENTERS[None]) ** 2).sum(axis=2)
    return np.tanh(30.0 * (r2 - 0.1875)).sum(axis=1)


@dataclass
class Scenario:
    name: str
    problem: MmpdeProblem
    config: IntegratorConfig
    alpha: object = None


def adaptation_metric(mesh, u):
    """Nodal values -> recovered Hessian -> alpha -> adaptation metric."""
    H = recover_hessian(mesh, u)
    alpha = solve_regularization_alpha(mesh, H)
    return build_adaptation_metric(H, alpha), alpha


def _config(tau, t_end, **overrides):
    kw = dict(dt_init=1e-3 * tau, dt_min=1e-12 * tau, dt_max=10.0 * tau, t_end=t_end,
              stop_rel_tol=1e-10, stop_window=20)
    kw.update(overrides)
    return IntegratorConfig(**kw)


def build(name, n=None, functional=None, tau=None, boundary=None, seed=0,
          amplitude=None, t_end=None, **overrides):
    """Assemble the named scenario at resolution ``n``."""
    functional = functional or FunctionalSpec.huang(1.5, 1.0 / 3.0)
    if name == "smooth2d":
        n = n or 16
        mesh = unit_square_mesh(n, boundary=boundary or "fixed")
        amp = (0.3 if amplitude is None else amplitude) / n
        mesh = _nonsingular_perturbation(mesh, amp, seed)
        tau = tau or 1.0
        problem = MmpdeProblem(mesh, IdentityMetric(2), functional, tau)
        return Scenario(name, problem, _config(tau, t_end or 500.0, **overrides))
    if name == "smooth3d":
        n = n or 6
        mesh = box_mesh(n, boundary=boundary or "fixed")
        amp = (0.3 if amplitude is None else amplitude) / n
        mesh = _nonsingular_perturbation(mesh, amp, seed)
        tau = tau or 1.0
        problem = MmpdeProblem(mesh, IdentityMetric(3), functional, tau)
        return Scenario(name, problem, _config(tau, t_end or 20.0, **overrides))
    if name == "sinewave":
        n = n or 24
        mesh = unit_square_mesh(n, boundary=boundary or "slide")
        metric, alpha = adaptation_metric(mesh, sine_wave(mesh.vertices))
        tau = tau or 0.01
        problem = MmpdeProblem(mesh, metric, functional, tau)
        cfg = _config(tau, t_end or 1.0, **overrides)
        return Scenario(name, problem, cfg, alpha)
    if name == "ninespheres":
        n = n or 16
        mesh = box_mesh(n, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0), boundary=boundary or "slide")
        metric, alpha = adaptation_metric(mesh, nine_spheres(mesh.vertices))
        tau = tau or 1.0
        problem = MmpdeProblem(mesh, metric, functional, tau)
        cfg = _config(tau, t_end or 1.0, **overrides)
        return Scenario(name, problem, cfg, alpha)
    raise ValueError(f"unknown scenario {name!r} (choose from {', '.join(SCENARIOS[:-1])})")


def custom(mesh, metric=None, functional=None, tau=1.0, t_end=1.0, **overrides):
    """Scenario around a user mesh; ``metric`` defaults to the identity."""
    functional = functional or FunctionalSpec.huang(1.5, 1.0 / 3.0)
    metric = metric or IdentityMetric(mesh.dim)
    problem = MmpdeProblem(mesh, metric, functional, tau)
    return Scenario("custom", problem, _config(tau, t_end, **overrides))


def _nonsingular_perturbation(mesh, amplitude, seed, attempts=20):
    for k in range(attempts):
        out = perturb_mesh(mesh, amplitude, seed + k)
        if out.is_nonsingular():
            return out
    raise RuntimeError("could not draw a nonsingular perturbation; lower the amplitude")
