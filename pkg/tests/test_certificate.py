import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from stochabs.certificate import (Certificate, certificate_gains, check_lmi, check_nonlinear_condition,
                                  derive_beta_gamma, derive_quadratic_gains, eig_bounds, gamma_hat,
                                  h_general, h_linear, h_quadratic, hess_sup, lmi_matrix, max_lmi_rate,
                                  second_to_qth_moment, sqrt_norm)
from stochabs.model import BoxUnion, GainFn

from conftest import linear_system


def eig2(P):
    """Closed-form eigenvalues of a symmetric 2x2 matrix."""
    (a, b), (_, d) = P
    m, r = (a + d) / 2, math.hypot((a - d) / 2, b)
    return m - r, m + r


def test_dc_lmi_accepts_40_rejects_44(dc):
    sys, cert, _ = dc
    assert check_lmi(sys.A, sys.B, sys.sigmas, cert.P, 40.0)
    assert not check_lmi(sys.A, sys.B, sys.sigmas, cert.P, 44.0)
    assert not check_lmi(sys.A, sys.B, sys.sigmas, cert.P, 400.0)
    assert max_lmi_rate(sys.A, sys.sigmas, cert.P) == pytest.approx(39.998, abs=2e-3)


def test_lmi_exact_on_diagonal_example():
    # A = -I, P = I, sigma = s I: M = (-2 + s^2 + k) I, so k <= 2 - s^2.
    A, s = -np.eye(2), 0.5
    sig = [s * np.eye(2)]
    assert check_lmi(A, None, sig, np.eye(2), 1.75)
    assert not check_lmi(A, None, sig, np.eye(2), 1.76)
    assert max_lmi_rate(A, sig, np.eye(2)) == pytest.approx(1.75)
    assert np.allclose(lmi_matrix(A, sig, np.eye(2), 1.0), -0.75 * np.eye(2))


def test_asymmetric_P_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        check_lmi(-np.eye(2), None, [np.eye(2)], np.array([[1.0, 0.1], [0.0, 1.0]]), 1.0)


def test_dc_eigenvalues_and_gains(dc):
    sys, cert, g = dc
    lo, hi = eig2(cert.P)
    assert eig_bounds(cert.P) == pytest.approx((lo, hi), rel=1e-12)
    assert lo == pytest.approx(1.00004, abs=1e-5) and hi == pytest.approx(1.44486, abs=1e-5)
    assert g.kappa == 20.0
    assert g.alpha_lo.c == pytest.approx(lo ** 0.5)
    assert g.alpha_hi.c == pytest.approx((2 * hi) ** 0.5)
    assert g.gamma_hat.c == pytest.approx(hi / math.sqrt(lo))
    assert g.beta.c == pytest.approx(g.alpha_hi.c / g.alpha_lo.c)


def test_pendulum_plain_quadratic_gains(pend):
    sys, cert, g = pend
    assert eig2(cert.P) == pytest.approx((1.2, 1.8))
    assert (g.alpha_lo.c, g.alpha_lo.p) == pytest.approx((1.2, 1.0))
    assert (g.alpha_hi.c, g.alpha_hi.p) == pytest.approx((3.6, 1.0))
    assert g.beta.c == pytest.approx(3.0) and g.beta.kappa == 0.7691
    assert g.gamma.c == pytest.approx(8.76 / (math.e * 0.7691 * 1.2))
    assert g.gamma.c == pytest.approx(3.49, abs=0.01)
    # diam_inf(D) = 2 and ||2P||_inf = 3.6 with the (2/q) factor at q=2.
    assert g.gamma_hat.c == pytest.approx(7.2)


def test_plain_and_scaled_forms_agree():
    P = np.array([[1.5, 0.3], [0.3, 1.5]])
    plain = Certificate(P, 2, "plain-quadratic", kappa=0.5, rho=GainFn(1.0, 2.0))
    scaled = Certificate(2 * P, 2, "scaled-quadratic", kappa_tilde=1.0)
    x, y = np.array([[0.3, -0.2]]), np.array([[-0.1, 0.4]])
    assert plain.V(x, y) == pytest.approx(scaled.V(x, y))
    assert plain.k_tilde == scaled.k_tilde == 1.0
    g = derive_quadratic_gains(2 * P, 2, 2, 1.0, 1.0)
    assert g.alpha_lo.c == pytest.approx(1.2) and g.kappa == pytest.approx(0.5)


def test_general_beta_gamma_split():
    g = derive_quadratic_gains(np.eye(2), 2, 2, 1.0, 1.0)
    g = g.__class__(GainFn(2.0, 2.0), GainFn(4.0, 2.0), 1.0, GainFn(1.0, 1.0))
    beta, gamma = derive_beta_gamma(g)
    assert beta.c == pytest.approx(2.0) and beta.p == 1.0 and beta.kappa == 0.5
    assert gamma.c == pytest.approx(math.sqrt(1.0 / math.e)) and gamma.p == 0.5


def test_gamma_hat_unavailable_for_q3():
    with pytest.raises(ValueError, match="unavailable"):
        gamma_hat(np.eye(2), 3, BoxUnion.of([(0, 1), (0, 1)]))


def test_quadratic_rho_formula():
    P = np.array([[2.0, 0.5], [0.5, 1.0]])
    for q in (1, 2):
        g = derive_quadratic_gains(P, 2, q, 3.0, 1.5)
        expect = 2 ** (q / 2) * 1.5 ** q / 3.0 ** (q - 1) * sqrt_norm(P) ** q
        assert g.rho.c == pytest.approx(expect) and g.rho.p == q


def _max_variation_ratio(cert, n=2, count=20000, seed=0):
    rng = np.random.default_rng(seed)
    x, y, yp = (rng.uniform(-1, 1, (count, n)) for _ in range(3))
    return np.max(np.abs(cert.V(x, y) - cert.V(x, yp)) / np.abs(y - yp).max(axis=1))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-0.15, 0.15), st.floats(0.2, 3.0))
def test_sound_gamma_hat_bounds_V_variation(a, b, d):
    P = np.array([[a, b], [b, d]])
    dom = BoxUnion.of([(-1, 1), (-1, 1)])
    for q in (1, 2):
        cert = Certificate(P, q, "scaled-quadratic", kappa_tilde=1.0)
        assert _max_variation_ratio(cert) <= gamma_hat(P, q, dom, "sound").c * (1 + 1e-12)


def test_sound_gamma_hat_is_tight_and_published_constant_is_not_a_bound():
    dom = BoxUnion.of([(-1, 1), (-1, 1)])
    # q=1, P=I: V is the Euclidean distance, whose inf-norm Lipschitz constant is sqrt(2).
    assert gamma_hat(np.eye(2), 1, dom, "paper").c == 1.0
    assert gamma_hat(np.eye(2), 1, dom, "sound").c == pytest.approx(math.sqrt(2))
    ratio = _max_variation_ratio(Certificate(np.eye(2), 1, kappa_tilde=1.0))
    assert 1.0 < ratio <= math.sqrt(2)
    # Pendulum (scaled matrix 2P): exact slope 14.4 against the published 7.2.
    P2 = 2 * np.array([[1.5, 0.3], [0.3, 1.5]])
    assert gamma_hat(P2, 2, dom, "paper").c == pytest.approx(7.2)
    assert gamma_hat(P2, 2, dom, "sound").c == pytest.approx(14.4)
    with pytest.raises(ValueError):
        gamma_hat(P2, 2, dom, "loose")


def test_pendulum_certificate_fails_sampled_check(pend):
    # The published constants do not satisfy the decay condition for this model.
    sys, cert, _ = pend
    rep = check_nonlinear_condition(sys, cert.scaled_P, 2, cert.k_tilde, 20000, 0)
    assert not rep.ok and rep.worst_margin > 0 and rep.witness is not None


def test_contracting_linear_system_passes_sampled_check():
    sys = linear_system(-np.eye(2), np.eye(2), [0.1 * np.eye(2)], [(-1, 1), (-1, 1)], [(-1, 1), (-1, 1)])
    rep = check_nonlinear_condition(sys, np.eye(2), 2, 1.5, 5000, 0)
    assert rep.ok
    rep = check_nonlinear_condition(sys, np.eye(2), 2, 2.5, 5000, 0)
    assert not rep.ok


# ---------------------------------------------------------------- h bounds

def test_h_vanishes_at_zero_time_and_zero_noise(pend, dc):
    psys, pcert, pg = pend
    dsys, dcert, _ = dc
    assert h_quadratic(pcert.scaled_P, 2, pcert.k_tilde, psys, 0.0) == 0.0
    assert h_general(pg, hess_sup(pcert), psys, 2, 0.0) == 0.0
    assert h_linear(dsys.A, dsys.B, dsys.sigmas, dcert.P, 40.0, dsys, 0.0) == 0.0
    quiet = lambda s: s.__class__(**{**s.__dict__, "sigmas": 0 * s.sigmas, "Z": 0.0})
    assert h_quadratic(pcert.scaled_P, 2, pcert.k_tilde, quiet(psys), 3.0) == 0.0
    assert h_general(pg, hess_sup(pcert), quiet(psys), 2, 3.0) == 0.0
    assert h_linear(dsys.A, dsys.B, 0 * dsys.sigmas, dcert.P, 40.0, quiet(dsys), 0.01) == 0.0


def test_h_general_needs_q_at_least_2(dc):
    sys, _, g = dc
    with pytest.raises(ValueError, match="q >= 2"):
        h_general(g, 1.0, sys, 1, 1.0)


def test_h_linear_scalar_closed_form():
    a, b, s, P, kh, t = -2.0, 3.0, 0.4, 1.7, 1.5, 0.8
    X, U = 2.0, 0.5
    sys = linear_system([[a]], [[b]], [[[s]]], [(-X, X)], [(-U, U)])
    f = lambda r: (math.exp(a * r) * X + b * (math.exp(a * r) - 1) / a * U) ** 2
    expect = s * s * P * math.exp(-kh * t) / P * quad(f, 0, t)[0]
    assert h_linear([[a]], [[b]], [[[s]]], [[P]], kh, sys, t, 128) == pytest.approx(expect, rel=1e-6)
    f0 = lambda r: (math.exp(a * r) * X) ** 2
    expect0 = s * s * math.exp(-kh * t) * quad(f0, 0, t)[0]
    assert h_linear([[a]], [[b]], [[[s]]], [[P]], kh, sys, t, 128, input_term=False) == pytest.approx(expect0, rel=1e-6)


def test_h_linear_quadrature_converged(dc):
    sys, cert, _ = dc
    h = h_linear(sys.A, sys.B, sys.sigmas, cert.P, 40.0, sys, 0.01)
    fine = h_linear(sys.A, sys.B, sys.sigmas, cert.P, 40.0, sys, 0.01, 4096)
    assert h == pytest.approx(fine, rel=1e-5)
    with pytest.raises(ValueError):
        h_linear(sys.A, sys.B, sys.sigmas, cert.P, 40.0, sys, 0.01, 8)


def test_h_quadratic_closed_form(pend):
    sys, cert, _ = pend
    P, kt, t = cert.scaled_P, cert.k_tilde, 3.0
    lmin, lmax = eig2(P)
    sp2 = sqrt_norm(P) ** 2
    lead = 2 * sp2 * 4 * 1 * 0.03 ** 2 * math.exp(-kt * t) / (lmin ** 2 * kt)
    state = lmax * (1 - math.exp(-kt * t / 2)) * 1.0
    inp = sp2 * sys.L_u ** 2 / (math.e * kt) * 1.5 ** 2 * t
    assert h_quadratic(P, 2, kt, sys, t) == pytest.approx(lead * (state + inp))
    assert h_quadratic(P, 2, kt, sys, t, input_term=False) == pytest.approx(lead * state)


def test_second_to_qth_moment():
    assert second_to_qth_moment(0.04, 1) == pytest.approx(0.2)
    assert second_to_qth_moment(0.04, 2) == 0.04
    with pytest.raises(ValueError):
        second_to_qth_moment(0.04, 3)


def test_certificate_gains_complete(dc):
    sys, cert, _ = dc
    g = certificate_gains(cert, sys)
    assert None not in (g.gamma_hat, g.beta, g.gamma)
