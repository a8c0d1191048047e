"""Lyapunov certificates for incremental stability in the q-th moment.

Two forms of quadratic V are supported:

* ``scaled-quadratic``: V = ((1/q) d'Pd)^(q/2) with d = x - x'; gains are
  derived from P, q and kappa_tilde (or kappa_hat for linear systems).
* ``plain-quadratic``: V = d'Pd with user-supplied kappa and rho; the
  remaining gains follow from the eigenvalues of P.  This equals the
  scaled form with q=2 and matrix 2P.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.integrate import cumulative_simpson, simpson
from scipy.linalg import expm, sqrtm

from .model import BoxUnion, GainFn, KLFn, SystemSpec, induced_inf_norm, sample_boxes

FORMS = ("scaled-quadratic", "plain-quadratic")


def _check_p(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise ValueError("P must be square")
    if not np.allclose(P, P.T, rtol=0, atol=1e-12):
        raise ValueError("P must be symmetric")
    if np.linalg.eigvalsh(P)[0] <= 0:
        raise ValueError("P must be positive definite")
    return P


def eig_bounds(P: np.ndarray) -> tuple[float, float]:
    w = np.linalg.eigvalsh(_check_p(P))
    return float(w[0]), float(w[-1])


def sqrt_norm(P: np.ndarray) -> float:
    """Induced infinity norm of the principal square root of P."""
    return induced_inf_norm(np.real(sqrtm(_check_p(P))))


@dataclass(frozen=True)
class Certificate:
    P: np.ndarray
    q: int
    form: str = "scaled-quadratic"
    kappa_tilde: float | None = None
    kappa_hat: float | None = None
    kappa: float | None = None
    rho: GainFn | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "P", _check_p(self.P))
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.form not in FORMS:
            raise ValueError(f"unknown certificate form {self.form!r}")
        if self.form == "plain-quadratic":
            if self.q != 2 or self.kappa is None or self.rho is None:
                raise ValueError("plain-quadratic form needs q=2 with kappa and rho")
        elif self.kappa_tilde is None and self.kappa_hat is None:
            raise ValueError("scaled-quadratic form needs kappa_tilde or kappa_hat")

    @property
    def k_tilde(self) -> float:
        """kappa_tilde, using kappa_tilde = q * kappa_hat / 2 on the LMI route."""
        if self.form == "plain-quadratic":
            return 2.0 * float(self.kappa)
        if self.kappa_tilde is not None:
            return float(self.kappa_tilde)
        return self.q * float(self.kappa_hat) / 2.0

    @property
    def scaled_P(self) -> np.ndarray:
        """Matrix of the equivalent scaled-quadratic form."""
        return 2.0 * self.P if self.form == "plain-quadratic" else self.P

    def V(self, x: np.ndarray, xp: np.ndarray) -> np.ndarray:
        d = np.asarray(x, dtype=float) - np.asarray(xp, dtype=float)
        quad = np.einsum("...i,ij,...j->...", d, self.P, d)
        if self.form == "plain-quadratic":
            return quad
        return np.power(np.maximum(quad, 0.0) / self.q, self.q / 2.0)


@dataclass(frozen=True)
class DerivedGains:
    alpha_lo: GainFn
    alpha_hi: GainFn
    kappa: float
    rho: GainFn
    gamma_hat: GainFn | None = None
    beta: KLFn | None = None
    gamma: GainFn | None = None


# ---------------------------------------------------------------- LMI route

def lmi_matrix(A, sigmas, P, kappa_hat) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    P = _check_p(P)
    S = sum((s.T @ P @ s for s in np.asarray(sigmas, dtype=float)), np.zeros_like(P))
    M = P @ A + A.T @ P + S + kappa_hat * P
    return 0.5 * (M + M.T)


def lmi_tolerance(A, sigmas, P, kappa_hat, rtol: float = 1e-6) -> float:
    """Rounding allowance scaled by the magnitude of the LMI's terms."""
    A = np.asarray(A, dtype=float)
    P = _check_p(P)
    S = sum((s.T @ P @ s for s in np.asarray(sigmas, dtype=float)), np.zeros_like(P))
    scale = 2 * np.linalg.norm(P @ A, 2) + np.linalg.norm(S, 2) + abs(kappa_hat) * np.linalg.norm(P, 2)
    return rtol * float(scale)


def check_lmi(A, B, sigmas, P, kappa_hat: float, rtol: float = 1e-6) -> bool:
    """True iff PA + A'P + sum s_i'Ps_i + kappa_hat P is negative semidefinite.

    Semidefiniteness is judged up to ``rtol`` times the size of the terms, so
    matrices printed to four digits still certify their stated rate.
    """
    A = np.asarray(A, dtype=float)
    if B is not None and np.asarray(B).shape[0] != A.shape[0]:
        raise ValueError("B row count must match A")
    lam = float(np.linalg.eigvalsh(lmi_matrix(A, sigmas, P, kappa_hat))[-1])
    return lam <= lmi_tolerance(A, sigmas, P, kappa_hat, rtol)


def max_lmi_rate(A, sigmas, P) -> float:
    """Largest kappa_hat for which the LMI holds exactly (generalized eigenvalue)."""
    P = _check_p(P)
    M0 = lmi_matrix(A, sigmas, P, 0.0)
    L = np.linalg.cholesky(P)
    Li = np.linalg.inv(L)
    return float(-np.linalg.eigvalsh(Li @ M0 @ Li.T)[-1])


# ---------------------------------------------------------- nonlinear route

@dataclass(frozen=True)
class ConditionReport:
    ok: bool
    worst_margin: float
    witness: dict | None = None
    samples: int = 0


def check_nonlinear_condition(sys: SystemSpec, P, q: int, kappa_tilde: float,
                              samples: int, seed: int, chunk: int = 20000) -> ConditionReport:
    """Sampled falsification of

        d'P J(z,u) d + 1/2 ||sqrt(P)(sigma(x) - sigma(x'))||_F^2 <= -kappa_tilde (d'Pd / q)

    over (x, x', z, u) drawn uniformly from domain^3 x input set.  ``worst_margin``
    is the largest LHS - RHS seen; a positive value comes with a witness.
    """
    if samples <= 0:
        raise ValueError("samples must be positive")
    if q not in (1, 2):
        raise ValueError("q must be 1 or 2")
    P = _check_p(P)
    rng = np.random.default_rng(seed)
    worst, witness = -math.inf, None
    done = 0
    while done < samples:
        k = min(chunk, samples - done)
        x, xp, z = sample_boxes(sys.domain, 3 * k, rng).reshape(3, k, sys.n)
        u = sample_boxes(sys.input_set, k, rng)
        d = x - xp
        J = sys.jacobian(z, u)
        lhs = np.einsum("ki,ij,kjl,kl->k", d, P, J, d)
        ds = np.einsum("pij,kj->kpi", sys.sigmas, d)
        lhs = lhs + 0.5 * np.einsum("kpi,ij,kpj->k", ds, P, ds)
        rhs = -kappa_tilde * np.einsum("ki,ij,kj->k", d, P, d) / q
        margin = lhs - rhs
        i = int(np.argmax(margin))
        if margin[i] > worst:
            worst = float(margin[i])
            witness = {"x": x[i].tolist(), "x_prime": xp[i].tolist(), "z": z[i].tolist(),
                       "u": u[i].tolist(), "margin": worst}
        done += k
    ok = worst <= 0.0
    return ConditionReport(ok, worst, None if ok else witness, samples)


# -------------------------------------------------------------------- gains

def derive_quadratic_gains(P, n: int, q: int, kappa_tilde: float, L_u: float) -> DerivedGains:
    """alpha_lo, alpha_hi, kappa and rho for the scaled-quadratic V."""
    if q not in (1, 2):
        raise ValueError("q must be 1 or 2")
    lmin, lmax = eig_bounds(P)
    a_lo = GainFn((lmin / q) ** (q / 2.0), 1.0)
    a_hi = GainFn((n * lmax / q) ** (q / 2.0), 1.0)
    rho_c = (n ** (q / 2.0)) * (L_u ** q) / (kappa_tilde ** (q - 1)) * sqrt_norm(P) ** q
    return DerivedGains(a_lo, a_hi, kappa_tilde / q, GainFn(rho_c, float(q)))


def plain_quadratic_gains(P, n: int, kappa: float, rho: GainFn) -> DerivedGains:
    """Gains of V = d'Pd with respect to r = ||d||^2."""
    lmin, lmax = eig_bounds(P)
    return DerivedGains(GainFn(lmin, 1.0), GainFn(n * lmax, 1.0), float(kappa), rho)


def derive_beta_gamma(g: DerivedGains) -> tuple[KLFn, GainFn]:
    """beta and gamma of the stability estimate built from the Lyapunov gains.

    With linear alpha_lo its inverse is additive, so the factor 2 of the
    general split is dropped.
    """
    a, b, k, rho = g.alpha_lo, g.alpha_hi, g.kappa, g.rho
    if a.p == 1.0:
        beta = KLFn(b.c / a.c, b.p, k)
        gamma = GainFn(rho.c / (math.e * k * a.c), rho.p)
    else:
        beta = KLFn((2 * b.c / a.c) ** (1 / a.p), b.p / a.p, k / a.p)
        gamma = GainFn((2 * rho.c / (math.e * k * a.c)) ** (1 / a.p), rho.p / a.p)
    return beta, gamma


GAMMA_CONVENTIONS = ("paper", "sound")


def _cube_vertices(n: int) -> np.ndarray:
    return np.array(np.meshgrid(*[[-1.0, 1.0]] * n, indexing="ij")).reshape(n, -1).T


def gamma_hat(P, q: int, domain: BoxUnion, convention: str = "paper") -> GainFn:
    """Gain with |V(x,y) - V(x,y')| <= gamma_hat(||y - y'||_inf) on the domain.

    "paper" uses the published constants: lambda_max / sqrt(lambda_min) for
    q=1 and (2/q) ||P||_inf diam_inf(D) for q=2.  Both measure the gradient in
    the infinity norm rather than its dual, so they can fall short by up to a
    factor sqrt(n) (q=1) or n (q=2).
    "sound" uses the exact constants for the infinity norm: max over cube
    vertices v of sqrt(v'Pv) (q=1, V is the P-norm of x - y), and
    (2/q) max over vertices w of D - D of ||Pw||_1 (q=2, mean value theorem).
    """
    P = _check_p(P)
    if convention not in GAMMA_CONVENTIONS:
        raise ValueError(f"convention must be one of {GAMMA_CONVENTIONS}")
    if q not in (1, 2):
        raise ValueError("closed-form gamma_hat unavailable for this q")
    lo, hi = domain.bounding_box()
    if convention == "paper":
        if q == 1:
            lmin, lmax = eig_bounds(P)
            return GainFn(lmax / math.sqrt(lmin), 1.0)
        return GainFn((2.0 / q) * induced_inf_norm(P) * float(np.max(hi - lo)), 1.0)
    v = _cube_vertices(P.shape[0])
    if q == 1:
        return GainFn(math.sqrt(float(np.max(np.einsum("ki,ij,kj->k", v, P, v)))), 1.0)
    w = v * (hi - lo)
    return GainFn((2.0 / q) * float(np.max(np.abs(w @ P).sum(axis=1))), 1.0)


def certificate_gains(cert: Certificate, sys: SystemSpec, convention: str = "paper") -> DerivedGains:
    """All gains (alpha_lo, alpha_hi, kappa, rho, gamma_hat, beta, gamma)."""
    if cert.form == "plain-quadratic":
        g = plain_quadratic_gains(cert.P, sys.n, cert.kappa, cert.rho)
    else:
        g = derive_quadratic_gains(cert.P, sys.n, cert.q, cert.k_tilde, sys.L_u)
    gh = gamma_hat(cert.scaled_P, cert.q, sys.domain, convention)
    beta, gamma = derive_beta_gamma(g)
    return replace(g, gamma_hat=gh, beta=beta, gamma=gamma)


def hess_sup(cert: Certificate) -> float:
    """sup ||sqrt(d2V/dx2)||^2 for the quadratic forms (constant Hessian)."""
    if cert.form == "scaled-quadratic" and cert.q != 2:
        raise ValueError("constant Hessian needs q=2")
    return sqrt_norm(cert.scaled_P) ** 2


# ---------------------------------------------------------------- h routes

def _sup_sq(bu: BoxUnion) -> float:
    return bu.sup_norm() ** 2


def h_quadratic(P, q: int, kappa_tilde: float, sys: SystemSpec, t: float,
                input_term: bool = True) -> float:
    """Closed-form bound on E||xi(t) - nominal(t)||^2 for scaled-quadratic V."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    lmin, lmax = eig_bounds(P)
    sp2 = sqrt_norm(P) ** 2
    n, kt = sys.n, kappa_tilde
    lead = 2 * sp2 * n * n * min(n, sys.p) * sys.Z ** 2 * math.exp(-2 * kt * t / q) / (lmin ** 2 * kt)
    state = lmax * (1 - math.exp(-kt * t / 2)) * _sup_sq(sys.domain)
    inp = sp2 * sys.L_u ** 2 / (math.e * kt) * _sup_sq(sys.input_set) * t if input_term else 0.0
    return lead * (state + inp)


def h_linear(A, B, sigmas, P, kappa_hat: float, sys: SystemSpec, t: float,
             quad_steps: int = 256, input_term: bool = True) -> float:
    """Bound on E||xi(t) - nominal(t)||^2 for linear drift and diffusion."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if quad_steps < 16:
        raise ValueError("quad_steps must be >= 16")
    if t == 0:
        return 0.0
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    lmin, _ = eig_bounds(P)
    S = sum((s.T @ P @ s for s in np.asarray(sigmas, dtype=float)), np.zeros_like(P))
    lam_s = max(float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1]), 0.0)
    if lam_s == 0.0:
        return 0.0
    steps = quad_steps + quad_steps % 2
    s = np.linspace(0.0, t, steps + 1)
    E = np.array([expm(A * si) for si in s])
    eA = np.array([induced_inf_norm(e) for e in E])
    integrand_x = eA * sys.domain.sup_norm()
    if input_term:
        eB = np.array([induced_inf_norm(e @ B) for e in E])
        inner = cumulative_simpson(eB, x=s, initial=0.0)
        integrand = integrand_x + inner * sys.input_set.sup_norm()
    else:
        integrand = integrand_x
    outer = simpson(integrand ** 2, x=s)
    return sys.n * lam_s * math.exp(-kappa_hat * t) / lmin * float(outer)


def h_general(g: DerivedGains, hess: float, sys: SystemSpec, q: int, t: float,
              quad_steps: int = 64, input_term: bool = True) -> float:
    """Bound on E||xi(t) - nominal(t)||^q from any Lyapunov gains, q >= 2."""
    if q < 2:
        raise ValueError("the general h bound requires q >= 2")
    if t < 0:
        raise ValueError("t must be nonnegative")
    if g.beta is None or g.gamma is None:
        g = replace(g, **dict(zip(("beta", "gamma"), derive_beta_gamma(g))))
    if t == 0 or sys.Z == 0:
        return 0.0
    steps = quad_steps + quad_steps % 2
    s = np.linspace(0.0, t, steps + 1)
    x_term = g.beta(sys.domain.sup_norm() ** q, s)
    u_term = g.gamma(sys.input_set.sup_norm()) if input_term else 0.0
    integral = simpson(np.power(x_term + u_term, 2.0 / q), x=s)
    inner = 0.5 * hess * sys.n * min(sys.n, sys.p) * sys.Z ** 2 * math.exp(-g.kappa * t) * integral
    return float(g.alpha_lo.inverse(inner))


def second_to_qth_moment(h2: float, q: int) -> float:
    """E||.||^q <= (E||.||^2)^(q/2) for q <= 2 (Jensen)."""
    if q > 2:
        raise ValueError("second-moment bound only controls q <= 2")
    return h2 ** (q / 2.0)
