"""Closed-form probabilistic guarantees for the refined closed loop.

All functions return violation-probability bounds clamped to [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .certificate import Certificate
from .model import BoxUnion, GainFn, SystemSpec, sample_boxes

ALPHA_CONVENTIONS = ("paper", "vertex")


@dataclass(frozen=True)
class SBF:
    """phi(x, xbar) = V(x, 0) + V(0, xbar)."""

    cert: Certificate

    def __call__(self, x, xbar) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        xbar = np.asarray(xbar, dtype=float)
        return self.cert.V(x, np.zeros_like(x)) + self.cert.V(np.zeros_like(xbar), xbar)

    def at_start(self, x0) -> float:
        return float(self(x0, x0))


def sbf_from_certificate(cert: Certificate, sys: SystemSpec | None = None) -> SBF:
    if sys is not None:
        zero_x, zero_u = np.zeros(sys.n), np.zeros(sys.m)
        if np.any(sys.f(zero_x, zero_u) != 0) or np.any(sys.sigma(zero_x) != 0):
            raise ValueError("phi from V needs f(0,0)=0 and sigma(0)=0")
    return SBF(cert)


def _check_epsilon(epsilon: float) -> None:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")


def bound_infinite_horizon(phi_x0: float, eps: float, epsilon: float) -> float:
    """P{sup_t ||deviation|| >= epsilon} <= (sqrt(phi) + eps) / epsilon."""
    _check_epsilon(epsilon)
    if phi_x0 < 0 or eps < 0:
        raise ValueError("phi and eps must be nonnegative")
    return min(1.0, (math.sqrt(phi_x0) + eps) / epsilon)


def markov_pointwise(eps: float, epsilon: float) -> float:
    """Per-instant violation probability eps / epsilon."""
    _check_epsilon(epsilon)
    return min(1.0, eps / epsilon)


def hessian(cert: Certificate) -> np.ndarray:
    """Constant Hessian in x of the quadratic member of the certificate.

    V = d'Pd gives 2P; V = (1/2) d'Pd gives P.  For q=1 the Hessian of
    sqrt(d'Pd) is unbounded near the diagonal, so the q=2 member is used.
    """
    return 2.0 * cert.P if cert.form == "plain-quadratic" else cert.P


@dataclass(frozen=True)
class AlphaSup:
    paper: float  # lambda_max(sum s_i' H s_i) * sup ||x||_inf^2
    vertex: float  # exact max of Tr(sigma' H sigma) over the box vertices
    sampled: float  # max over random interior points (never above vertex)

    def get(self, convention: str) -> float:
        if convention not in ALPHA_CONVENTIONS:
            raise ValueError(f"convention must be one of {ALPHA_CONVENTIONS}")
        return getattr(self, convention)


def alpha_sup(cert: Certificate, sys: SystemSpec, domain: BoxUnion, samples: int = 1000,
              seed: int = 0) -> AlphaSup:
    """Bounds on sup_D Tr(sigma(x)' H sigma(x)) for linear diffusion.

    The trace is the convex quadratic form x' (sum s_i' H s_i) x, so its
    maximum over a box sits at a vertex.
    """
    if cert.form not in ("plain-quadratic", "scaled-quadratic"):
        raise ValueError("alpha_sup needs a quadratic V")
    H = hessian(cert)
    S = sum((s.T @ H @ s for s in sys.sigmas), np.zeros((sys.n, sys.n)))
    S = 0.5 * (S + S.T)
    lam = max(float(np.linalg.eigvalsh(S)[-1]), 0.0)
    paper = lam * domain.sup_norm() ** 2
    verts = domain.vertices()
    vertex = float(np.max(np.einsum("ki,ij,kj->k", verts, S, verts)))
    pts = sample_boxes(domain, samples, np.random.default_rng(seed))
    sampled = float(np.max(np.einsum("ki,ij,kj->k", pts, S, pts)))
    return AlphaSup(paper, vertex, sampled)


def bound_finite_horizon(alpha: float, kappa: float, alpha_lo: GainFn, q: int,
                         epsilon: float, N: int, tau: float) -> float:
    """Violation bound over the instants {0, tau, ..., N tau}."""
    _check_epsilon(epsilon)
    if N < 1 or tau <= 0 or kappa <= 0 or alpha < 0:
        raise ValueError("need N >= 1, tau > 0, kappa > 0, alpha >= 0")
    a = float(alpha_lo(epsilon ** q))
    if a >= alpha / (2 * kappa):
        val = -math.expm1(-alpha * N * tau / (2 * a))
    else:
        # (e^{kT} - 1) / e^{kT} without overflow for long horizons.
        val = -math.expm1(-N * tau * kappa) * alpha / (2 * kappa * a)
    return min(1.0, max(0.0, val))
