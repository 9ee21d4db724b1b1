"""Nominal stabilizing controller and constructive strict Lyapunov functions.

The error kinematics in polar coordinates are written as

    (rho, phi, alpha)' = f(rho, phi, alpha) + g(rho, alpha) @ (z, omega_tilde)

where ``f`` is the closed loop under the virtual laws (v*, omega*) and
``z = (v - v*) / rho``, ``omega_tilde = omega - omega*``. The strict Lyapunov
function ``V = nu * V1 + xi' P xi`` with ``xi = (alpha, phi)`` is lifted to
the full state as ``Vr = mu * ln(V + 1) + U(z, omega_tilde)``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import SingularSystem
from .model import RHO_MIN, ControlInput, PolarErrorState, _out, check_rho, polar_kinematics, to_polar

_SERIES_CUTOFF = 1e-4


@dataclass(frozen=True)
class Gains:
    """Controller constants.

    ``m`` and ``gamma`` configure the QP; ``r`` is the radius of the compact
    ball in (rho, phi, alpha) on which the strict Lyapunov function is built.
    """

    k_rho: float = 2.0
    k_alpha: float = 4.0
    k_z: float = 6.0
    k_omega: float = 6.0
    lam: float = 3.0
    nu: float = 10.0
    mu: float = 1.0
    r: float = 8.0
    m: float = 2.0
    gamma: float = 1.5

    def __post_init__(self):
        for name in ("k_rho", "k_alpha", "k_z", "k_omega", "lam", "nu", "r"):
            val = getattr(self, name)
            if not (np.isfinite(val) and val > 0):
                raise ValueError(f"gain {name} must be positive and finite, got {val!r}")
        # mu = 0 is accepted so certify_mu can demonstrate its failure
        if not (np.isfinite(self.mu) and self.mu >= 0):
            raise ValueError(f"gain mu must be nonnegative, got {self.mu!r}")
        if not self.m >= 1:
            raise ValueError(f"m must be >= 1, got {self.m!r}")
        if not self.gamma >= 1:
            raise ValueError(f"gamma must be >= 1, got {self.gamma!r}")

    @property
    def A(self) -> np.ndarray:
        """Hurwitz matrix of the output-injection form for (alpha, phi)."""
        return np.array([[-self.k_alpha, self.lam * self.k_rho], [-self.k_rho, 0.0]])


@dataclass(frozen=True)
class LyapunovData:
    P: np.ndarray
    c: float
    lambda_max_P: float

    def __post_init__(self):
        P = np.asarray(self.P)
        if P.shape != (2, 2) or not np.allclose(P, P.T, rtol=0, atol=1e-14):
            raise ValueError("P must be a symmetric 2x2 matrix")
        if np.min(np.linalg.eigvalsh(P)) <= 0:
            raise ValueError("P must be positive definite")
        if not self.c > 0:
            raise ValueError("c must be positive")


def sinc(s):
    """sin(s)/s with sinc(0) = 1."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    s2 = s * s
    return _out(np.where(small, 1.0 - s2 / 6.0 + s2 * s2 / 120.0, np.sin(safe) / safe))


def sinc_pair(s):
    """(sinc(s), sinc'(s)) for an array, sharing the trigonometric evaluations."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    sn, cs = np.sin(safe), np.cos(safe)
    s2 = s * s
    val = np.where(small, 1.0 - s2 / 6.0 + s2 * s2 / 120.0, sn / safe)
    der = np.where(small, -s / 3.0 + s * s2 / 30.0, (safe * cs - sn) / (safe * safe))
    return val, der


def sinc_prime(s):
    """Derivative of :func:`sinc`."""
    s = np.asarray(s, dtype=float)
    small = np.abs(s) < _SERIES_CUTOFF
    safe = np.where(small, 1.0, s)
    return _out(np.where(small, -s / 3.0 + s ** 3 / 30.0,
                         (safe * np.cos(safe) - np.sin(safe)) / (safe * safe)))


def virtual_law(rho, phi, alpha, g: Gains):
    """Virtual velocities (v*, omega*) stabilizing the polar kinematics."""
    rho, phi, alpha = (np.asarray(a, float) for a in (rho, phi, alpha))
    v_star = -g.k_rho * np.cos(alpha) * rho
    w_star = -g.k_alpha * alpha - g.k_rho * sinc(2.0 * alpha) * (alpha - g.lam * phi)
    return _out(v_star), _out(w_star)


def virtual_law_rates(rho, phi, alpha, v, omega, g: Gains, rho_min: float = RHO_MIN):
    """Time derivatives of (v*, omega*) along the actual motion with speeds (v, omega)."""
    rho_d, phi_d, alpha_d = polar_kinematics(rho, phi, alpha, v, omega, rho_min)
    rho, phi, alpha = (np.asarray(a, float) for a in (rho, phi, alpha))
    v_star_d = -g.k_rho * (np.cos(alpha) * rho_d - np.sin(alpha) * alpha_d * rho)
    w_star_d = -g.k_alpha * alpha_d - g.k_rho * (
        2.0 * sinc_prime(2.0 * alpha) * alpha_d * (alpha - g.lam * phi)
        + sinc(2.0 * alpha) * (alpha_d - g.lam * phi_d))
    return _out(v_star_d), _out(w_star_d)


def error_state(s, g: Gains, rho_min: float = RHO_MIN) -> PolarErrorState:
    """Map a :class:`CartesianState` to the error coordinates chi."""
    rho, phi, alpha = to_polar(s)
    check_rho(rho, rho_min)
    v_star, w_star = virtual_law(rho, phi, alpha, g)
    return PolarErrorState(rho, phi, alpha, _out((s.v - v_star) / rho), _out(s.omega - w_star))


def state_from_error(chi: PolarErrorState, g: Gains):
    """Inverse of :func:`error_state` (theta comes back as alpha + phi)."""
    from .model import CartesianState, from_polar

    x, y, theta = from_polar(chi.rho, chi.phi, chi.alpha)
    v_star, w_star = virtual_law(chi.rho, chi.phi, chi.alpha, g)
    return CartesianState(x, y, theta, _out(v_star + chi.rho * chi.z), _out(w_star + chi.omega_tilde))


def nominal_control(chi: PolarErrorState, v, omega, g: Gains, rho_min: float = RHO_MIN) -> ControlInput:
    """Backstepping laws giving z' = -k_z z and omega_tilde' = -k_omega omega_tilde."""
    rho, phi, alpha, z, wt = chi
    v_star_d, w_star_d = virtual_law_rates(rho, phi, alpha, v, omega, g, rho_min)
    ca = np.cos(alpha)
    u1 = v_star_d - rho * (g.k_rho * ca * ca * z - ca * z * z + g.k_z * z)
    u2 = w_star_d - g.k_omega * wt
    return ControlInput(_out(u1), _out(u2))


def closed_loop_drift(rho, phi, alpha, g: Gains) -> np.ndarray:
    """f(rho, phi, alpha): polar kinematics with (v, omega) = (v*, omega*)."""
    rho, phi, alpha = (np.asarray(a, float) for a in (rho, phi, alpha))
    s2 = sinc(2.0 * alpha)
    ca = np.cos(alpha)
    return np.stack(np.broadcast_arrays(-g.k_rho * ca * ca * rho,
                                        -g.k_rho * s2 * alpha,
                                        -g.k_alpha * alpha + g.lam * g.k_rho * s2 * phi), axis=-1)


def interconnection(rho, alpha) -> np.ndarray:
    """g(rho, alpha): shape (..., 3, 2) map from (z, omega_tilde) into the kinematics."""
    rho, alpha = np.broadcast_arrays(np.asarray(rho, float), np.asarray(alpha, float))
    sa = np.sin(alpha)
    zero, one = np.zeros_like(rho), np.ones_like(rho)
    return np.stack([np.stack([rho * np.cos(alpha), zero], -1),
                     np.stack([sa, zero], -1),
                     np.stack([-sa, one], -1)], -2)


def weak_lyapunov_V1(rho, phi, alpha, g: Gains):
    rho, phi, alpha = (np.asarray(a, float) for a in (rho, phi, alpha))
    return _out(0.5 * (rho * rho + g.lam * phi * phi + alpha * alpha))


def weak_lyapunov_V1_grad(rho, phi, alpha, g: Gains) -> np.ndarray:
    """Gradient of V1 over (rho, phi, alpha)."""
    rho, phi, alpha = (np.asarray(a, float) for a in (rho, phi, alpha))
    return np.stack(np.broadcast_arrays(rho, g.lam * phi, alpha), axis=-1)


def solve_lyapunov_P(g: Gains) -> np.ndarray:
    """Solve A'P + PA = -I for symmetric P via its three scalar unknowns."""
    (a, b), (c, d) = g.A
    # unknowns (p11, p12, p22); equations are the (1,1), (1,2), (2,2) entries
    M = np.array([[2 * a, 2 * c, 0.0],
                  [b, a + d, c],
                  [0.0, 2 * b, 2 * d]])
    rhs = np.array([-1.0, 0.0, -1.0])
    try:
        p11, p12, p22 = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem("Lyapunov system is singular; is A Hurwitz?") from exc
    if np.linalg.cond(M) > 1e14:
        raise SingularSystem("Lyapunov system is numerically singular")
    return np.array([[p11, p12], [p12, p22]])


def injection_term(alpha, phi, g: Gains) -> np.ndarray:
    """K(alpha, phi), the part of the (alpha, phi) dynamics that vanishes with alpha."""
    alpha, phi = (np.asarray(a, float) for a in (alpha, phi))
    w = g.k_rho * (1.0 - sinc(2.0 * alpha))
    return np.stack(np.broadcast_arrays(-g.lam * w * phi, w * alpha), axis=-1)


def _c_ratio_sup(g: Gains, r: float, n: int) -> float:
    a = np.linspace(-r, r, n)
    alpha, phi = np.meshgrid(a, a, indexing="ij")
    norm_xi = np.hypot(alpha, phi)
    mask = (norm_xi <= r) & (alpha != 0.0)
    K = injection_term(alpha[mask], phi[mask], g)
    ratio = np.linalg.norm(K, axis=-1) / (norm_xi[mask] * np.abs(alpha[mask]))
    return float(np.max(ratio))


def estimate_c(g: Gains, n: int = 400, margin: float = 0.1) -> float:
    """Grid estimate of the constant c in |K| <= c |xi| |alpha| on |xi| <= r.

    An even ``n`` keeps alpha = 0 off the grid.
    """
    if n < 400:
        raise ValueError("grid resolution must be at least 400")
    return (1.0 + margin) * _c_ratio_sup(g, g.r, n)


def lyapunov_data(g: Gains, n: int = 400) -> LyapunovData:
    P = solve_lyapunov_P(g)
    return LyapunovData(P=P, c=estimate_c(g, n), lambda_max_P=float(np.max(np.linalg.eigvalsh(P))))


def nu_lower_bound(g: Gains, L: LyapunovData) -> float:
    """Smallest nu for which nu*V1 + V2 is provably strict on the ball of radius r."""
    return 2.0 * L.c ** 2 * g.r ** 2 * L.lambda_max_P ** 2 / g.k_alpha


def _strict_V(rho, phi, alpha, g: Gains, P: np.ndarray):
    phi, alpha = np.asarray(phi, float), np.asarray(alpha, float)
    v2 = P[0, 0] * alpha * alpha + 2.0 * P[0, 1] * alpha * phi + P[1, 1] * phi * phi
    return g.nu * weak_lyapunov_V1(rho, phi, alpha, g) + v2


def _strict_V_grad(rho, phi, alpha, g: Gains, P: np.ndarray) -> np.ndarray:
    phi, alpha = np.asarray(phi, float), np.asarray(alpha, float)
    d_alpha = 2.0 * (P[0, 0] * alpha + P[0, 1] * phi)
    d_phi = 2.0 * (P[0, 1] * alpha + P[1, 1] * phi)
    v1g = weak_lyapunov_V1_grad(rho, phi, alpha, g)
    return g.nu * v1g + np.stack(np.broadcast_arrays(np.zeros_like(d_phi), d_phi, d_alpha), axis=-1)


def _warn_outside(rho, phi, alpha, g: Gains) -> None:
    if np.any(np.sqrt(np.square(rho) + np.square(phi) + np.square(alpha)) > g.r):
        warnings.warn(f"state outside the ball of radius r={g.r}; V is not certified there",
                      RuntimeWarning, stacklevel=3)


def strict_V(rho, phi, alpha, g: Gains, L: LyapunovData):
    """V = nu*V1 + xi' P xi, xi = (alpha, phi)."""
    _warn_outside(rho, phi, alpha, g)
    return _out(_strict_V(rho, phi, alpha, g, L.P))


def strict_V_grad(rho, phi, alpha, g: Gains, L: LyapunovData) -> np.ndarray:
    _warn_outside(rho, phi, alpha, g)
    return _strict_V_grad(rho, phi, alpha, g, L.P)


def lie_derivatives_V(rho, phi, alpha, g: Gains, P: np.ndarray):
    """Return (V, L_f V, L_g V) for the error kinematics; L_g V has shape (..., 2)."""
    V = _strict_V(rho, phi, alpha, g, P)
    dV = _strict_V_grad(rho, phi, alpha, g, P)
    LfV = np.sum(dV * closed_loop_drift(rho, phi, alpha, g), axis=-1)
    LgV = np.einsum("...i,...ij->...j", dV, interconnection(rho, alpha))
    return V, LfV, LgV


def composite_Vr(chi: PolarErrorState, g: Gains, L: LyapunovData):
    """mu*ln(V + 1) + (z^2/k_z + omega_tilde^2/k_omega)/2."""
    rho, phi, alpha, z, wt = (np.asarray(a, float) for a in chi)
    V = _strict_V(rho, phi, alpha, g, L.P)
    return _out(g.mu * np.log1p(V) + 0.5 * (z * z / g.k_z + wt * wt / g.k_omega))


def composite_Vr_grad(chi: PolarErrorState, g: Gains, L: LyapunovData) -> np.ndarray:
    """Gradient of Vr over (rho, phi, alpha, z, omega_tilde)."""
    rho, phi, alpha, z, wt = (np.asarray(a, float) for a in chi)
    V = _strict_V(rho, phi, alpha, g, L.P)
    dV = _strict_V_grad(rho, phi, alpha, g, L.P) * (g.mu / (1.0 + V))[..., None]
    tail = np.stack(np.broadcast_arrays(z / g.k_z, wt / g.k_omega), axis=-1)
    dV, tail = np.broadcast_arrays(dV[..., :, None], tail[..., None, :])
    return np.concatenate([dV[..., 0], tail[..., 0, :]], axis=-1)


def Vr_rate_nominal(rho, phi, alpha, z, wt, g: Gains, P: np.ndarray):
    """d/dt Vr along the nominal closed loop: mu(LfV + LgV.zeta)/(V+1) - |zeta|^2."""
    z, wt = np.asarray(z, float), np.asarray(wt, float)
    V, LfV, LgV = lie_derivatives_V(rho, phi, alpha, g, P)
    return g.mu * (LfV + LgV[..., 0] * z + LgV[..., 1] * wt) / (1.0 + V) - z * z - wt * wt


def certify_mu(g: Gains, L: LyapunovData, zeta_max: float = 10.0, n: int = 41,
               n_zeta_r: int = 11, n_zeta_th: int = 24, ball: float = 1e-3):
    """Grid certificate that Vr decreases along the nominal closed loop.

    Samples (rho, phi, alpha) on a cube grid clipped to the ball of radius r
    (angles restricted to [-pi, pi]) and zeta on a polar grid of radius
    ``zeta_max``. Returns ``(ok, margin)`` where ``margin`` is the largest
    sampled Vr'/|chi|^2 outside a ball of radius ``ball``.
    """
    ang = min(g.r, np.pi)
    rho = np.linspace(0.0, g.r, n)
    ang_grid = np.linspace(-ang, ang, n)
    R, PH, AL = (a.ravel() for a in np.meshgrid(rho, ang_grid, ang_grid, indexing="ij"))
    keep = R * R + PH * PH + AL * AL <= g.r * g.r
    R, PH, AL = R[keep], PH[keep], AL[keep]
    V, LfV, LgV = lie_derivatives_V(R, PH, AL, g, L.P)

    zr = np.linspace(0.0, zeta_max, n_zeta_r)
    th = np.linspace(0.0, 2 * np.pi, n_zeta_th, endpoint=False)
    Z = np.concatenate([[0.0], np.outer(zr[1:], np.cos(th)).ravel()])
    W = np.concatenate([[0.0], np.outer(zr[1:], np.sin(th)).ravel()])

    p2 = R * R + PH * PH + AL * AL
    worst = -np.inf
    for z, w in zip(Z, W):
        rate = g.mu * (LfV + LgV[:, 0] * z + LgV[:, 1] * w) / (1.0 + V) - z * z - w * w
        chi2 = p2 + z * z + w * w
        sel = chi2 > ball * ball
        if np.any(sel):
            worst = max(worst, float(np.max(rate[sel] / chi2[sel])))
    return worst < 0.0, worst
