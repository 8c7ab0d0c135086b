"""Meshing-functional integrands and their derivatives.

All evaluators broadcast over leading axes: ``J`` and ``M`` may be
``(..., d, d)`` and ``detJ`` ``(...)``. Matrix derivatives follow the
scalar-by-matrix layout ``(dG/dJ)[i, j] = dG/dJ[j, i]`` so that
``dG = tr(dG/dJ @ dJ)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonSPDMetric

WINSLOW = "winslow"
HUANG = "huang"


@dataclass(frozen=True)
class FunctionalSpec:
    kind: str = HUANG
    p: float = 1.5
    theta: float = 1.0 / 3.0

    def __post_init__(self):
        if self.kind not in (WINSLOW, HUANG):
            raise ValueError(f"unknown functional {self.kind!r}")
        if self.kind == HUANG:
            if not 0.0 <= self.theta <= 1.0:
                raise ValueError("theta must lie in [0, 1]")
            if self.p <= 0:
                raise ValueError("p must be positive")
            # det(J)^(p-1) is singular at det J = 0 for p < 1 unless its coefficient vanishes
            if self.p < 1 and self.theta != 0.5:
                raise ValueError("Huang functional needs p >= 1 (or theta = 1/2)")

    @classmethod
    def winslow(cls):
        return cls(WINSLOW, 1.0, 0.0)

    @classmethod
    def huang(cls, p=1.5, theta=1.0 / 3.0):
        return cls(HUANG, float(p), float(theta))

    @classmethod
    def from_config(cls, cfg):
        """Build from a mapping such as ``{"type": "huang", "p": 1.5, "theta": 0.333}``."""
        kind = str(cfg.get("type", HUANG)).lower()
        if kind == WINSLOW:
            return cls.winslow()
        return cls.huang(float(cfg.get("p", 1.5)), float(cfg.get("theta", 1.0 / 3.0)))

    def to_config(self):
        if self.kind == WINSLOW:
            return {"type": WINSLOW}
        return {"type": HUANG, "p": self.p, "theta": self.theta}

    def exponent(self, d):
        """Power ``q`` of ``tr(J M^-1 J^T)`` in the coercivity bound."""
        return 1.0 if self.kind == WINSLOW else d * self.p / 2.0

    def is_coercive(self, d):
        return self.kind == HUANG and self.theta > 0 and self.exponent(d) > d / 2.0


@dataclass
class GDerivatives:
    G: np.ndarray
    dG_dJ: np.ndarray
    dG_ddet: np.ndarray
    dG_dM: np.ndarray
    dG_dx: np.ndarray


def _inv_det(M):
    M = np.asarray(M, dtype=float)
    det = np.linalg.det(M)
    if np.any(det <= 0) or np.any(np.linalg.eigvalsh(M)[..., 0] <= 0):
        raise NonSPDMetric("metric is not positive definite")
    return np.linalg.inv(M), det


def eval_g(spec, J, detJ, M, x=None):
    """Evaluate ``G`` and its derivatives with respect to ``J``, ``det J``, ``M`` and ``x``."""
    J = np.asarray(J, dtype=float)
    detJ = np.asarray(detJ, dtype=float)
    d = J.shape[-1]
    Minv, detM = _inv_det(M)
    JT = np.swapaxes(J, -1, -2)
    MinvJT = Minv @ JT
    trace = np.einsum("...ij,...ji->...", J, MinvJT)
    MJJM = MinvJT @ np.swapaxes(MinvJT, -1, -2)  # M^-1 J^T J M^-1
    batch = trace.shape
    dG_dx = np.zeros(batch + (d,))

    if spec.kind == WINSLOW:
        return GDerivatives(trace, 2.0 * MinvJT, np.zeros(batch), -MJJM, dG_dx)

    p, theta = spec.p, spec.theta
    q = d * p / 2.0
    sdet = np.sqrt(detM)
    dq = d ** q
    tq1 = trace ** (q - 1.0)
    tq = tq1 * trace
    ratio_p = (detJ / sdet) ** p
    G = theta * sdet * tq + (1.0 - 2.0 * theta) * dq * sdet * ratio_p
    dG_dJ = (d * p * theta) * (sdet * tq1)[..., None, None] * MinvJT
    if theta == 0.5:
        dG_ddet = np.zeros(batch)
    else:
        dG_ddet = p * (1.0 - 2.0 * theta) * dq * detM ** ((1.0 - p) / 2.0) * detJ ** (p - 1.0)
    dG_dM = (-(theta * d * p / 2.0) * (sdet * tq1)[..., None, None] * MJJM
             + (theta / 2.0) * (sdet * tq)[..., None, None] * Minv
             + ((1.0 - 2.0 * theta) * (1.0 - p) * dq / 2.0) * (sdet * ratio_p)[..., None, None] * Minv)
    return GDerivatives(G, dG_dJ, dG_ddet, dG_dM, dG_dx)


def eval_g_value(spec, J, detJ, M):
    """``G`` alone; cheaper than :func:`eval_g` for energy evaluations."""
    J = np.asarray(J, dtype=float)
    d = J.shape[-1]
    Minv, detM = _inv_det(M)
    trace = np.einsum("...ij,...jk,...ik->...", J, Minv, J)
    if spec.kind == WINSLOW:
        return trace
    q = d * spec.p / 2.0
    sdet = np.sqrt(detM)
    G = spec.theta * sdet * trace ** q
    if spec.theta != 0.5:
        G = G + (1.0 - 2.0 * spec.theta) * d ** q * sdet * (np.asarray(detJ) / sdet) ** spec.p
    return G


def balance_p(spec, M):
    """Balance factor ``P`` making the flow invariant under ``M -> c M``."""
    M = np.asarray(M, dtype=float)
    d = M.shape[-1]
    detM = np.linalg.det(M)
    if spec.kind == WINSLOW:
        return detM ** (1.0 / d)
    return detM ** ((spec.p - 1.0) / 2.0)


@dataclass(frozen=True)
class Coercivity:
    q: float
    alpha: float
    beta: float


def coercivity_constants(spec, bounds, d):
    """Constants of ``G >= alpha tr(J M^-1 J^T)^q - beta``, or ``None`` if not coercive.

    For Huang's functional ``(det J / sqrt(det M))^p <= (tr(J M^-1 J^T) / d)^q``
    (AM-GM on the eigenvalues of ``J M^-1 J^T``), so the second term is bounded
    below by ``min(0, 1 - 2 theta) sqrt(det M) tr^q`` and ``beta = 0`` always works.
    """
    if not spec.is_coercive(d):
        return None
    m_lo, _ = bounds
    if m_lo <= 0:
        raise NonSPDMetric("metric lower bound must be positive")
    theta = spec.theta
    alpha = min(theta, 1.0 - theta) * m_lo ** (d / 2.0)
    if alpha <= 0:
        return None
    return Coercivity(spec.exponent(d), alpha, 0.0)


def coercivity_lower_bound(spec, coerc, J, M):
    """Right side ``alpha tr^q - beta`` of the coercivity inequality."""
    Minv = np.linalg.inv(M)
    trace = np.einsum("...ij,...jk,...ik->...", J, Minv, J)
    return coerc.alpha * trace ** coerc.q - coerc.beta
