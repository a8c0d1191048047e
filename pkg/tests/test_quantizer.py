import math

import pytest
from hypothesis import given, strategies as st

from stochabs import quantizer as qz
from stochabs.certificate import h_general, h_linear, hess_sup, second_to_qth_moment

H_PEND = 0.000943896  # general h route at tau=3 without the input term


def h_dc(sys, cert, input_term=False):
    return second_to_qth_moment(h_linear(sys.A, sys.B, sys.sigmas, cert.P, 40.0, sys, 0.01,
                                         input_term=input_term), 1)


@pytest.mark.parametrize("route", qz.ROUTES)
def test_lower_bound_is_the_feasibility_threshold(pend, route):
    _, _, g = pend
    lb = qz.lower_bound(route, g, H_PEND, 3.0, 2)
    ok = lambda e: qz._route_ok(route, e, 3.0, 0.0, 0.0, g, H_PEND, 2)
    assert ok(lb * (1 + 1e-7)) and not ok(lb * (1 - 1e-7))


def test_pendulum_lower_bounds(pend):
    sys, cert, g = pend
    h = h_general(g, hess_sup(cert), sys, 2, 3.0, input_term=False)
    assert h == pytest.approx(H_PEND, rel=1e-5)
    assert qz.eps_lower_bound_thm53(g.beta, h, 3.0, 2) == pytest.approx(0.0677, abs=1e-4)
    assert qz.eps_lower_bound_thm51(g, h, 3.0, 2) == pytest.approx(0.4525, abs=1e-4)


def test_pendulum_published_quantization_is_admissible(pend):
    _, _, g = pend
    assert qz.check_thm53(0.085, 3.0, 0.0033, 0.0, g.beta, g.gamma, H_PEND, 2)
    assert not qz.check_thm53(0.085, 3.0, 0.02, 0.0, g.beta, g.gamma, H_PEND, 2)


def test_dc_thm53_infeasible_below_critical_tau(dc):
    sys, cert, g = dc
    h = h_dc(sys, cert)
    assert not qz.check_thm53(1.0, 0.01, 0.01, 0.0, g.beta, g.gamma, h, 1)
    with pytest.raises(qz.InfeasibleError, match="no admissible ε"):
        qz.eps_lower_bound_thm53(g.beta, h, 0.01, 1)
    tau_star = qz.min_feasible_tau_thm53(g.beta, 1)
    assert tau_star == pytest.approx(math.log(g.beta.c) / 20.0)
    assert abs(tau_star - 0.026) <= 0.003
    qz.eps_lower_bound_thm53(g.beta, h, tau_star * 1.01, 1)
    with pytest.raises(qz.InfeasibleError):
        qz.eps_lower_bound_thm53(g.beta, h, tau_star * 0.99, 1)


def test_dc_thm51_plan(dc):
    sys, cert, g = dc
    h = h_dc(sys, cert)
    p = qz.plan(1.0, 0.01, "thm51", True, g, h, 1, sys.domain, sys.input_set, eta=0.01)
    assert (p.eta, p.mu) == (0.01, 0.0) and qz.validate(p, g)
    # Keeping the input term in h leaves no room at eps = 1.
    with pytest.raises(qz.InfeasibleError):
        qz.plan(1.0, 0.01, "thm51", True, g, h_dc(sys, cert, True), 1, sys.domain, sys.input_set)


def test_auto_eta_is_largest_admissible_ladder_value(pend):
    sys, _, g = pend
    p = qz.plan(0.085, 3.0, "thm53", True, g, H_PEND, 2, sys.domain, sys.input_set)
    assert qz.validate(p, g)
    bigger = [v for v in qz.ladder_values(2.0) if v > p.eta]
    assert bigger and not any(qz.check_thm53(0.085, 3.0, v, 0.0, g.beta, g.gamma, H_PEND, 2) for v in bigger)
    assert p.eta <= qz.max_feasible_eta("thm53", 0.085, 3.0, 0.0, g, H_PEND, 2, 2.0)


def test_auto_mu_for_continuous_inputs(dc):
    sys, cert, g = dc
    p = qz.plan(1.0, 0.01, "thm51", False, g, 0.0, 1, sys.domain, sys.input_set)
    assert p.mu > 0 and qz.validate(p, g)


def test_plan_rejects_eps_at_or_below_bound(pend):
    sys, _, g = pend
    with pytest.raises(qz.InfeasibleError) as exc:
        qz.plan(0.05, 3.0, "thm53", True, g, H_PEND, 2, sys.domain, sys.input_set)
    assert exc.value.lower_bound == pytest.approx(0.0677, abs=1e-4)
    with pytest.raises(qz.InfeasibleError):
        qz.plan(0.085, 3.0, "thm53", True, g, H_PEND, 2, sys.domain, sys.input_set, eta=0.05)


def test_lower_bound_monotone_in_h(pend):
    _, _, g = pend
    for route in qz.ROUTES:
        assert qz.lower_bound(route, g, H_PEND / 2, 3.0, 2) < qz.lower_bound(route, g, H_PEND, 3.0, 2)


@given(st.floats(1e-6, 1e3))
def test_ladder_values(upper):
    vals = qz.ladder_values(upper, 12)
    assert vals == sorted(vals, reverse=True) and vals[0] <= upper * (1 + 1e-12)
    for v in vals:
        mant = v / 10 ** math.floor(math.log10(v) + 1e-12)
        assert any(math.isclose(mant, m) or math.isclose(mant, m / 10) for m in qz.LADDER)
    # The first value is maximal: the next ladder value up exceeds the limit.
    above = [v for v in qz.ladder_values(upper * 100, 30) if v > vals[0]]
    assert min(above) > upper


def test_plan_serializes():
    p = qz.QuantizationPlan(3.0, 0.0033, 0.0, 0.085, 2, "thm53", 1e-3)
    assert qz.QuantizationPlan(**p.to_dict()) == p
