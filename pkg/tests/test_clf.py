import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import solve_continuous_lyapunov

from safeguide import clf, sim
from safeguide.errors import DomainError
from safeguide.model import CartesianState, PolarErrorState
from safeguide.verify import central_gradient, rel_error, sample_chi

from conftest import EX1_STATE


def test_gains_defaults_and_validation():
    g = clf.Gains()
    assert (g.k_rho, g.k_alpha, g.k_z, g.k_omega, g.lam, g.nu, g.mu, g.m, g.gamma) == (2, 4, 6, 6, 3, 10, 1, 2, 1.5)
    for bad in ({"k_rho": 0}, {"lam": -1}, {"r": float("inf")}, {"m": 0.5}, {"gamma": 0.9}, {"mu": -1}):
        with pytest.raises(ValueError):
            clf.Gains(**bad)


@pytest.mark.parametrize("s,expected", [(0.0, 1.0), (math.pi, 0.0), (1.0, 0.8414709848078965)])
def test_sinc_examples(s, expected):
    assert clf.sinc(s) == pytest.approx(expected, abs=1e-16)


def test_sinc_series_branch_is_continuous():
    # the two branches meet at the cutoff: compare just below and just above it
    below, above = 1e-4 * (1 - 1e-9), 1e-4 * (1 + 1e-9)
    assert abs(clf.sinc(below) - clf.sinc(above)) < 1e-15
    assert clf.sinc_prime(0.0) == 0.0
    assert abs(clf.sinc_prime(below) - clf.sinc_prime(above)) < 1e-11


def test_sinc_prime_matches_difference_quotient():
    s = np.linspace(-6, 6, 97)
    fd = (clf.sinc(s + 1e-6) - clf.sinc(s - 1e-6)) / 2e-6
    assert np.allclose(clf.sinc_prime(s), fd, atol=1e-8)
    val, der = clf.sinc_pair(s)
    assert np.array_equal(val, clf.sinc(s)) and np.allclose(der, clf.sinc_prime(s), atol=1e-15)


@pytest.mark.parametrize("p,expected", [((0, 0, 0), (0, 0)), ((1, 0, 0), (-2, 0)), ((1, 1, 0), (-2, 6))])
def test_virtual_law_examples(gains, p, expected):
    assert clf.virtual_law(*p, gains) == pytest.approx(expected, abs=1e-15)


def test_virtual_law_rates_examples(gains):
    assert clf.virtual_law_rates(1.0, 0.3, 0.2, 0.0, 0.0, gains) == (0.0, 0.0)
    vsd, _ = clf.virtual_law_rates(1.0, 0.0, 0.0, 1.0, 0.0, gains)
    assert vsd == pytest.approx(-2.0, abs=1e-15)
    with pytest.raises(DomainError):
        clf.virtual_law_rates(0.0, 0.0, 0.0, 1.0, 0.0, gains)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.1, 8), st.floats(-3, 3), st.floats(-3, 3), st.floats(-5, 5), st.floats(-5, 5))
def test_virtual_law_rates_chain_rule(rho, phi, alpha, v, w):
    g = clf.Gains()
    from safeguide.model import polar_kinematics
    d = np.array(polar_kinematics(rho, phi, alpha, v, w))
    h = 1e-6
    p = np.array([rho, phi, alpha])
    plus, minus = clf.virtual_law(*(p + h * d), g), clf.virtual_law(*(p - h * d), g)
    fd = (np.array(plus) - np.array(minus)) / (2 * h)
    an = np.array(clf.virtual_law_rates(rho, phi, alpha, v, w, g))
    assert np.all(np.abs(fd - an) <= 1e-5 * np.maximum(1, np.abs(an)))


def test_error_state_round_trip(gains):
    chi = clf.error_state(EX1_STATE, gains)
    back = clf.state_from_error(chi, gains)
    assert back.x == pytest.approx(7.0) and back.y == pytest.approx(0.63)
    assert back.v == pytest.approx(-3.73) and back.omega == pytest.approx(4.13)
    assert math.remainder(back.theta - 2.55, 2 * math.pi) == pytest.approx(0, abs=1e-12)


def test_nominal_control_is_feedforward_on_the_manifold(gains):
    chi = PolarErrorState(2.0, 0.4, -0.3, 0.0, 0.0)
    s = clf.state_from_error(chi, gains)
    u = clf.nominal_control(chi, s.v, s.omega, gains)
    assert (u.u1, u.u2) == pytest.approx(clf.virtual_law_rates(2.0, 0.4, -0.3, s.v, s.omega, gains))


def test_nominal_error_dynamics_are_exponential(gains):
    # with the input re-evaluated at every RK4 stage, z and omega_tilde follow
    # the exact solutions z0 exp(-k_z t) and w0 exp(-k_omega t)
    chi0 = clf.error_state(EX1_STATE, gains)
    sc = sim.Scenario(EX1_STATE, gains, controller="nominal", t_final=1.0, dt=1e-3, hold="stage")
    tr = sim.run(sc)
    t = tr.columns["t"]
    assert np.allclose(tr.columns["z"], chi0.z * np.exp(-gains.k_z * t), rtol=1e-7, atol=1e-9)
    assert np.allclose(tr.columns["omega_tilde"], chi0.omega_tilde * np.exp(-gains.k_omega * t), rtol=1e-7,
                       atol=1e-9)


def test_nominal_closed_loop_converges_from_example_state(gains):
    tr = sim.run(sim.Scenario(EX1_STATE, gains, controller="nominal", t_final=10.0))
    assert tr.final_rho() < 0.05
    # |(rho, alpha)| settles monotonically after the initial transient
    mag = np.hypot(tr.columns["rho"], tr.columns["alpha"])
    late = mag[tr.columns["t"] > 2.0]
    assert np.all(np.diff(late) <= 1e-12)


def test_weak_lyapunov_examples(gains):
    assert clf.weak_lyapunov_V1(0, 0, 0, gains) == 0.0
    assert clf.weak_lyapunov_V1(1, 1, 1, gains) == 2.5
    assert clf.weak_lyapunov_V1_grad(1, 2, 3, gains) == pytest.approx([1, 6, 3])


def test_V1_decrease_identity(gains, rng):
    p = sample_chi(rng, 5000, 1e-3, gains.r)[:, :3]
    f = clf.closed_loop_drift(*p.T, gains)
    dV1 = np.sum(clf.weak_lyapunov_V1_grad(*p.T, gains) * f, axis=-1)
    R, _, A = p.T
    assert np.allclose(dV1, -gains.k_rho * np.cos(A) ** 2 * R ** 2 - gains.k_alpha * A ** 2, rtol=1e-12, atol=1e-12)


def test_lyapunov_P_against_exact_solution(gains):
    # A = [[-4, 6], [-2, 0]] has the rational solution below (checked symbolically)
    P = clf.solve_lyapunov_P(gains)
    assert P == pytest.approx(np.array([[1 / 6, -1 / 12], [-1 / 12, 2 / 3]]), abs=1e-15)
    A = gains.A
    assert np.max(np.abs(A.T @ P + P @ A + np.eye(2))) <= 1e-10


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.1, 10))
def test_lyapunov_P_matches_scipy_and_is_positive(kr, ka, lam, s):
    g = clf.Gains(k_rho=kr, k_alpha=ka, lam=lam)
    P = clf.solve_lyapunov_P(g)
    assert np.allclose(P, solve_continuous_lyapunov(g.A.T, -np.eye(2)), rtol=1e-8, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(P) > 0)
    # scaling A by s scales P by 1/s: k_rho and k_alpha scale A; lam is a ratio
    gs = clf.Gains(k_rho=s * kr, k_alpha=s * ka, lam=lam)
    assert np.allclose(clf.solve_lyapunov_P(gs), P / s, rtol=1e-9)


def test_estimate_c_properties(gains):
    K = clf.injection_term(0.0, np.linspace(-3, 3, 7), gains)
    assert np.all(K == 0)
    small = clf.estimate_c(clf.Gains(r=0.1))
    # for small |xi| the ratio tends to k_rho * (2/3) * sqrt(lam^2 phi^2 + alpha^2) / |xi| <= k_rho lam 2/3
    assert 0 < small <= 1.1 * gains.k_rho * gains.lam * 2 / 3 * 1.01
    cs = [clf.estimate_c(clf.Gains(r=r)) for r in (0.5, 1, 2, 4, 8)]
    assert all(a <= b * (1 + 1e-12) for a, b in zip(cs, cs[1:]))
    with pytest.raises(ValueError):
        clf.estimate_c(gains, n=100)


def test_estimate_c_bounds_a_finer_grid(gains, lyap):
    a = np.linspace(-gains.r, gains.r, 1201)
    A, PH = np.meshgrid(a, a)
    xi = np.hypot(A, PH)
    m = (xi <= gains.r) & (A != 0)
    K = clf.injection_term(A[m], PH[m], gains)
    assert np.all(np.linalg.norm(K, axis=-1) <= lyap.c * xi[m] * np.abs(A[m]))


def test_strict_V_examples(gains, lyap):
    assert clf.strict_V(0, 0, 0, gains, lyap) == 0.0
    with pytest.warns(RuntimeWarning):
        clf.strict_V(10.0, 0, 0, gains, lyap)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        clf.strict_V(1.0, 0.5, 0.5, gains, lyap)


def test_strict_V_decrease_bound(gains, lyap, rng):
    """V' <= -nu k_rho cos^2 rho^2 - |xi|^2/2 wherever the constructive bound on nu holds."""
    g = clf.Gains(r=1.0)
    L = clf.lyapunov_data(g)
    g = clf.Gains(r=1.0, nu=max(10.0, clf.nu_lower_bound(g, L)))
    p = sample_chi(rng, 10_000, 1e-3, g.r)[:, :3]
    _, LfV, _ = clf.lie_derivatives_V(*p.T, g, L.P)
    R, PH, A = p.T
    bound = -g.nu * g.k_rho * np.cos(A) ** 2 * R ** 2 - 0.5 * (A ** 2 + PH ** 2)
    assert np.all(LfV <= bound + 1e-12)


def test_strict_V_decreases_with_example_weight(gains, lyap, rng):
    p = sample_chi(rng, 10_000, 1e-3, gains.r)[:, :3]
    _, LfV, _ = clf.lie_derivatives_V(*p.T, gains, lyap.P)
    assert np.all(LfV < 0)


def test_nu_lower_bound_is_reported(gains, lyap):
    nb = clf.nu_lower_bound(gains, lyap)
    assert nb == pytest.approx(2 * lyap.c ** 2 * gains.r ** 2 * lyap.lambda_max_P ** 2 / gains.k_alpha)


def test_composite_Vr_examples(gains, lyap):
    assert clf.composite_Vr(PolarErrorState(0, 0, 0, 0, 0), gains, lyap) == 0.0
    assert clf.composite_Vr(PolarErrorState(0, 0, 0, 1, 1), gains, lyap) == pytest.approx(1 / 6, abs=1e-16)


@pytest.mark.parametrize("name", ["V1", "V", "Vr"])
def test_gradients_match_finite_differences(name, gains, lyap, rng):
    chi = sample_chi(rng, 100, 0.05, gains.r)
    p = chi[:, :3]
    if name == "V1":
        an, fd = clf.weak_lyapunov_V1_grad(*p.T, gains), central_gradient(lambda X: clf.weak_lyapunov_V1(*X.T, gains), p)
    elif name == "V":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            an = clf.strict_V_grad(*p.T, gains, lyap)
            fd = central_gradient(lambda X: clf.strict_V(*X.T, gains, lyap), p)
    else:
        an = clf.composite_Vr_grad(PolarErrorState(*chi.T), gains, lyap)
        fd = central_gradient(lambda X: clf.composite_Vr(PolarErrorState(*X.T), gains, lyap), chi)
    assert rel_error(an, fd) <= 1e-6


def test_Vr_rate_matches_simulated_derivative(gains, lyap, rng):
    """Analytic Vr' along the nominal loop against a difference quotient of a short simulation."""
    chi = sample_chi(rng, 40, 0.2, 4.0)
    chi = chi[chi[:, 0] > 0.05]
    s = clf.state_from_error(PolarErrorState(*chi.T), gains)
    X0 = np.column_stack([s.x, s.y, s.theta, s.v, s.omega])
    an = clf.Vr_rate_nominal(*chi.T, gains, lyap.P)
    dt = 1e-5
    sc = sim.Scenario(CartesianState(*X0[0]), gains, controller="nominal", t_final=2 * dt, dt=dt, hold="stage")
    trs = sim.integrate_batch(X0, sc, record=True)
    for a, tr in zip(an, trs):
        Vr = tr.columns["Vr"]
        fd = (-3 * Vr[0] + 4 * Vr[1] - Vr[2]) / (2 * dt)   # second-order one-sided at t = 0
        assert fd == pytest.approx(a, rel=1e-4, abs=1e-6)


def test_certify_mu(gains, lyap):
    ok, margin = clf.certify_mu(gains, lyap)
    assert ok and margin < 0
    ok_half, margin_half = clf.certify_mu(clf.Gains(mu=0.5), lyap)
    assert ok_half
    ok0, _ = clf.certify_mu(clf.Gains(mu=0.0), lyap)
    assert not ok0


def test_cascade_decrease_on_random_states(gains, lyap, rng):
    chi = sample_chi(rng, 10_000, 1e-3, gains.r)
    assert np.all(clf.Vr_rate_nominal(*chi.T, gains, lyap.P) < 0)


def test_local_exponential_tail(gains):
    """From |chi(0)| = 0.1 the nominal loop decays at a positive exponential rate."""
    chi0 = np.array([0.06, 0.04, -0.05, 0.03, -0.04])
    chi0 *= 0.1 / np.linalg.norm(chi0)
    s0 = clf.state_from_error(PolarErrorState(*chi0), gains)
    tr = sim.run(sim.Scenario(s0, gains, controller="nominal", t_final=4.0, rho_stop=1e-6))
    c = tr.columns
    norm = np.sqrt(sum(np.asarray(c[k]) ** 2 for k in ("rho", "phi", "alpha", "z", "omega_tilde")))
    t = c["t"]
    sel = (t > 0.5) & (norm > 1e-9)
    slope = np.polyfit(t[sel], np.log(norm[sel]), 1)[0]
    assert slope < -0.1
    C = np.max(norm * np.exp(-slope * t))
    assert np.all(norm <= C * np.exp(slope * t) * (1 + 1e-9))
