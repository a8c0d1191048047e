"""Admissible quantization parameters (tau, eta, mu) and precision lower bounds."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

from .certificate import DerivedGains
from .model import BoxUnion, GainFn, KLFn, span

ROUTES = ("thm51", "thm53")
LADDER = (5.0, 2.5, 2.0, 1.0)


class InfeasibleError(ValueError):
    """No admissible precision / quantization for the requested parameters."""

    def __init__(self, message: str, lower_bound: float | None = None):
        super().__init__(message)
        self.lower_bound = lower_bound


@dataclass(frozen=True)
class QuantizationPlan:
    tau: float
    eta: float
    mu: float
    eps: float
    q: int
    route: str
    h_at_tau: float

    def to_dict(self) -> dict:
        return asdict(self)


def check_thm51(eps: float, tau: float, eta: float, mu: float, gains: DerivedGains,
                h_tau: float, q: int) -> bool:
    """Both conditions of the Lyapunov-based bisimulation theorem.

    ``h_tau`` bounds E||xi - nominal||^q at time tau.
    """
    a_lo, a_hi, k = gains.alpha_lo, gains.alpha_hi, gains.kappa
    if gains.gamma_hat is None:
        raise ValueError("gamma_hat is required")
    target = a_lo(eps ** q)
    if a_hi(eta ** q) > target:
        return False
    lhs = (math.exp(-k * tau) * target + gains.rho(mu) / (math.e * k)
           + gains.gamma_hat(h_tau ** (1.0 / q) + eta))
    return bool(lhs <= target)


def check_thm53(eps: float, tau: float, eta: float, mu: float, beta: KLFn, gamma: GainFn,
                h_tau: float, q: int) -> bool:
    """(beta(eps^q, tau) + gamma(mu))^(1/q) + h^(1/q) + eta <= eps."""
    lhs = (beta(eps ** q, tau) + gamma(mu)) ** (1.0 / q) + h_tau ** (1.0 / q) + eta
    return bool(lhs <= eps)


def eps_lower_bound_thm51(gains: DerivedGains, h_tau: float, tau: float, q: int) -> float:
    if tau <= 0:
        raise ValueError("tau must be positive")
    if h_tau == 0:
        return 0.0
    y = gains.gamma_hat(h_tau ** (1.0 / q)) / (1.0 - math.exp(-gains.kappa * tau))
    return float(gains.alpha_lo.inverse(y)) ** (1.0 / q)


def eps_lower_bound_thm53(beta: KLFn, h_tau: float, tau: float, q: int) -> float:
    """Closed-form infimum of eps with eps - beta(eps^q, tau)^(1/q) > h^(1/q).

    Needs beta linear in r^q (p=1), which covers every gain this package derives.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if beta.p != 1.0:
        raise ValueError("closed form needs beta linear in its first argument")
    contraction = beta.c ** (1.0 / q) * math.exp(-beta.kappa * tau / q)
    if contraction >= 1.0:
        raise InfeasibleError(f"no admissible ε at this τ (contraction factor {contraction:.4g} >= 1)")
    return h_tau ** (1.0 / q) / (1.0 - contraction)


def min_feasible_tau_thm53(beta: KLFn, q: int) -> float:
    """Sampling time below which the closed-form bound has no solution."""
    return math.log(beta.c) / beta.kappa if beta.c > 1 else 0.0


def _route_ok(route, eps, tau, eta, mu, gains, h_tau, q) -> bool:
    if route == "thm51":
        return check_thm51(eps, tau, eta, mu, gains, h_tau, q)
    return check_thm53(eps, tau, eta, mu, gains.beta, gains.gamma, h_tau, q)


def lower_bound(route, gains, h_tau, tau, q) -> float:
    if route == "thm51":
        return eps_lower_bound_thm51(gains, h_tau, tau, q)
    return eps_lower_bound_thm53(gains.beta, h_tau, tau, q)


def ladder_values(upper: float, count: int = 40):
    """Round values 10^-k * {5, 2.5, 2, 1} not exceeding ``upper``, descending."""
    e = math.floor(math.log10(upper)) + 1
    out = []
    while len(out) < count:
        for m in LADDER:
            v = float(f"{m}e{e}")
            if v <= upper * (1 + 1e-12):
                out.append(v)
        e -= 1
    return out


def max_feasible_eta(route, eps, tau, mu, gains, h_tau, q, upper: float) -> float:
    """Bisection for the largest eta satisfying the route (0 if none)."""
    if not _route_ok(route, eps, tau, 0.0, mu, gains, h_tau, q):
        return 0.0
    if _route_ok(route, eps, tau, upper, mu, gains, h_tau, q):
        return upper
    lo, hi = 0.0, upper
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if _route_ok(route, eps, tau, mid, mu, gains, h_tau, q):
            lo = mid
        else:
            hi = mid
    return lo


def plan(eps: float, tau: float, route: str, inputs_finite: bool, gains: DerivedGains,
         h_tau: float, q: int, domain: BoxUnion, input_set: BoxUnion,
         eta: float | None = None, mu: float | None = None) -> QuantizationPlan:
    """Choose (eta, mu) for the given precision and sampling time.

    Explicit ``eta``/``mu`` are validated as given; otherwise mu is 0 for a
    finite input list, or the largest ladder value admitted by the route with
    eta = 0, and eta is the largest ladder value the route accepts.
    """
    if route not in ROUTES:
        raise ValueError(f"route must be one of {ROUTES}")
    try:
        lb = lower_bound(route, gains, h_tau, tau, q)
    except InfeasibleError as exc:
        raise InfeasibleError(str(exc), math.inf) from exc
    if eps <= lb:
        raise InfeasibleError(f"ε={eps} is not above the {route} lower bound {lb:.6g}", lb)
    if mu is None:
        if inputs_finite:
            mu = 0.0
        else:
            mu = next((v for v in ladder_values(span(input_set))
                       if _route_ok(route, eps, tau, 0.0, v, gains, h_tau, q)), None)
            if mu is None:
                raise InfeasibleError("no admissible input spacing", lb)
    if eta is None:
        eta = next((v for v in ladder_values(span(domain))
                    if _route_ok(route, eps, tau, v, mu, gains, h_tau, q)), None)
        if eta is None:
            raise InfeasibleError("no admissible state spacing", lb)
    elif not _route_ok(route, eps, tau, eta, mu, gains, h_tau, q):
        raise InfeasibleError(f"η={eta}, μ={mu} violate the {route} condition", lb)
    if eta > span(domain) or (mu and mu > span(input_set)):
        raise InfeasibleError("spacing exceeds span", lb)
    return QuantizationPlan(float(tau), float(eta), float(mu), float(eps), int(q), route, float(h_tau))


def validate(p: QuantizationPlan, gains: DerivedGains) -> bool:
    return _route_ok(p.route, p.eps, p.tau, p.eta, p.mu, gains, p.h_at_tau, p.q)
