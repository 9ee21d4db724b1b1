"""The gamma-m QP that merges the CLF and CBF constraints.

Decision variables are the scaled input ``u_bar = (u1/rho, u2)`` and the CLF
relaxation ``delta``; the problem is

    min  (|u_bar|^2 + m |delta|^2) / 2
    s.t. a1 . (u_bar + delta) <= b1        (CLF, b1 = -gamma_f(L_f1 Vr + rate))
         a2 . u_bar           <= b2        (CBF)

and is solved exactly by enumerating the four active sets.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import clf
from .cbf import BarrierSpec
from .errors import Infeasible
from .model import RHO_MIN, ControlInput, PolarErrorState, _out, check_rho, wrap_angle

log = logging.getLogger(__name__)

DEGENERATE_ROW = 1e-12
EPSILON_DEFAULT = 0.75

EMPTY, CLF, CBF, BOTH = 0, 1, 2, 3
ACTIVE_SETS = {EMPTY: frozenset(), CLF: frozenset({"clf"}), CBF: frozenset({"cbf"}),
               BOTH: frozenset({"clf", "cbf"})}
STATUS_OK, STATUS_CLF_FAULT, STATUS_INFEASIBLE = 0, 1, 2


def gamma_f(s, gamma: float):
    """gamma*s for s >= 0 and s otherwise."""
    s = np.asarray(s, dtype=float)
    return _out(np.where(s >= 0, gamma * s, s))


@dataclass(frozen=True)
class QpProblem:
    """Rows of the QP. ``a1`` is L_g1 Vr; it multiplies both u_bar and delta."""

    a1: np.ndarray
    b1: float
    a2: np.ndarray
    b2: float
    m_weight: float = 2.0
    gamma: float = 1.5

    def __post_init__(self):
        if not self.m_weight >= 1:
            raise ValueError("m_weight must be >= 1")
        if not self.gamma >= 1:
            raise ValueError("gamma must be >= 1")
        object.__setattr__(self, "a1", np.asarray(self.a1, dtype=float).reshape(2))
        object.__setattr__(self, "a2", np.asarray(self.a2, dtype=float).reshape(2))

    @property
    def clf_row(self) -> np.ndarray:
        """CLF row over the stacked variable (u_bar, delta)."""
        return np.concatenate([self.a1, self.a1])

    @property
    def cbf_row(self) -> np.ndarray:
        return np.concatenate([self.a2, np.zeros(2)])


@dataclass(frozen=True)
class QpSolution:
    u_bar: np.ndarray
    delta: np.ndarray
    active_set: frozenset
    multipliers: tuple
    warning: Optional[str] = None


def solve_batch(a1, b1, a2, b2, m):
    """Vectorized closed-form solve.

    Rows have shape (N, 2) and bounds (N,). Returns
    ``(u_bar, delta, lam, active, status)`` with ``lam`` of shape (N, 2),
    ``active`` one of EMPTY/CLF/CBF/BOTH and ``status`` one of the STATUS_*
    codes. A degenerate row (norm < 1e-12) is dropped; if its bound is
    negative the status records a CLF fault or an infeasible CBF.
    """
    a1, a2 = np.atleast_2d(np.asarray(a1, float)), np.atleast_2d(np.asarray(a2, float))
    return solve_components(a1[:, 0], a1[:, 1], np.atleast_1d(np.asarray(b1, float)),
                            a2[:, 0], a2[:, 1], np.atleast_1d(np.asarray(b2, float)), m)


def solve_components(a1x, a1y, b1, a2x, a2y, b2, m):
    """:func:`solve_batch` on separate component arrays (the simulator's hot path)."""
    m = float(m)
    k = (m + 1.0) / m
    n1 = a1x * a1x + a1y * a1y
    n2 = a2x * a2x + a2y * a2y
    c12 = a1x * a2x + a1y * a2y
    use1 = n1 >= DEGENERATE_ROW ** 2
    use2 = n2 >= DEGENERATE_ROW ** 2
    status = np.where(~use2 & (b2 < 0), STATUS_INFEASIBLE,
                      np.where(~use1 & (b1 < 0), STATUS_CLF_FAULT, STATUS_OK))
    b1 = np.where(use1, b1, 0.0)
    b2 = np.where(use2, b2, 0.0)
    n1 = np.where(use1, n1, 1.0)
    n2 = np.where(use2, n2, 1.0)

    # single-row candidates: multiplier and the other row's value at that point
    l1 = -b1 / (k * n1)
    l2 = -b2 / n2
    empty_ok = (b1 >= 0) & (b2 >= 0)
    clf_ok = use1 & (b1 < 0) & (-l1 * c12 <= b2 + 1e-12 * (1.0 + np.abs(b2) + np.abs(l1 * c12)))
    cbf_ok = use2 & (b2 < 0) & (-l2 * c12 <= b1 + 1e-12 * (1.0 + np.abs(b1) + np.abs(l2 * c12)))
    # both rows active: [[k n1, c12], [c12, n2]] lam = -(b1, b2); det >= n1 n2 / m
    det = k * n1 * n2 - c12 * c12
    det = np.where(det > 0, det, 1.0)
    l1b = np.maximum((-b1 * n2 + c12 * b2) / det, 0.0)
    l2b = np.maximum((-k * n1 * b2 + c12 * b1) / det, 0.0)

    active = np.where(empty_ok, EMPTY, np.where(clf_ok, CLF, np.where(cbf_ok, CBF, BOTH)))
    lam1 = np.where(active == CLF, l1, np.where(active == BOTH, l1b, 0.0))
    lam2 = np.where(active == CBF, l2, np.where(active == BOTH, l2b, 0.0))
    lam1 = np.where(use1, lam1, 0.0)
    lam2 = np.where(use2, lam2, 0.0)
    ux = -lam1 * a1x - lam2 * a2x
    uy = -lam1 * a1y - lam2 * a2y
    u = np.stack([ux, uy], axis=-1)
    d = np.stack([-lam1 * a1x / m, -lam1 * a1y / m], axis=-1)
    return u, d, np.stack([lam1, lam2], axis=-1), active, status


def solve_gamma_m_qp(p: QpProblem) -> QpSolution:
    """Closed-form KKT solution of a single problem.

    Raises :class:`Infeasible` when the CBF row vanishes with a negative bound.
    """
    u, d, lam, active, status = solve_batch(p.a1[None], [p.b1], p.a2[None], [p.b2], p.m_weight)
    warning = None
    if status[0] == STATUS_INFEASIBLE:
        raise Infeasible(f"CBF row has no control authority and bound b2={p.b2!r} < 0")
    if status[0] == STATUS_CLF_FAULT:
        warning = f"CLF row vanished with b1={p.b1!r} < 0; constraint dropped"
        log.warning(warning)
    return QpSolution(u[0], d[0], ACTIVE_SETS[int(active[0])], (float(lam[0, 0]), float(lam[0, 1])), warning)


def kkt_residuals(p: QpProblem, sol: QpSolution) -> dict:
    """Stationarity, primal, dual and complementarity residuals (all >= 0)."""
    l1, l2 = sol.multipliers
    grad = np.concatenate([sol.u_bar, p.m_weight * sol.delta]) + l1 * p.clf_row + l2 * p.cbf_row
    f1 = float(p.a1 @ (sol.u_bar + sol.delta) - p.b1)
    f2 = float(p.a2 @ sol.u_bar - p.b2)
    return {"stationarity": float(np.max(np.abs(grad))),
            "primal": max(f1, f2, 0.0),
            "dual": max(-l1, -l2, 0.0),
            "complementarity": max(abs(l1 * f1), abs(l2 * f2))}


def objective(u_bar, delta, m):
    u_bar, delta = np.asarray(u_bar), np.asarray(delta)
    return 0.5 * (np.sum(u_bar * u_bar, axis=-1) + m * np.sum(delta * delta, axis=-1))


@dataclass(frozen=True)
class QpRows:
    """Everything the controller computes at a batch of states (component arrays)."""

    rho: np.ndarray
    phi: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    omega_tilde: np.ndarray
    V1: np.ndarray
    V: np.ndarray
    Vr: np.ndarray
    LfV: np.ndarray
    Lf1: np.ndarray
    rate: np.ndarray
    a1x: np.ndarray
    a1y: np.ndarray
    b1: np.ndarray
    a2x: np.ndarray
    a2y: np.ndarray
    b2: np.ndarray
    h: np.ndarray
    B: np.ndarray
    u1_nominal: np.ndarray
    u2_nominal: np.ndarray

    @property
    def a1(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.a1x, self.a1y), axis=-1)

    @property
    def a2(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(self.a2x, self.a2y), axis=-1)


def qp_rows(x, y, theta, v, omega, g: clf.Gains, P: np.ndarray, barrier: Optional[BarrierSpec],
            epsilon: float = EPSILON_DEFAULT, rho_min: float = RHO_MIN, rate_form: str = "positive",
            check: bool = True) -> QpRows:
    """Assemble both QP rows directly from Cartesian components (vectorized).

    The CLF row is ``gamma_f(L_f1 Vr + rate) + a1 . (u_bar + delta) <= 0``
    with ``rate = eps*(-L_fV)/(V+1) + |zeta|^2/2`` (``rate_form="positive"``).
    ``rate_form="literal"`` flips the sign of ``rate``; it is kept only to
    demonstrate that the flipped form does not stabilize. The nominal
    backstepping input is returned alongside since it shares every term.
    """
    x, y, theta, v, omega = (np.asarray(a_, float) for a_ in (x, y, theta, v, omega))
    rho = np.hypot(x, y)
    if check:
        check_rho(rho, rho_min)
    phi = np.arctan2(y, x)
    alpha = np.pi - np.mod(np.pi - (theta - phi), 2.0 * np.pi)
    ca, sa = np.cos(alpha), np.sin(alpha)
    s2, s2p = clf.sinc_pair(2.0 * alpha)
    kr, ka, lam = g.k_rho, g.k_alpha, g.lam
    err = alpha - lam * phi
    z = (v + kr * ca * rho) / rho
    wt = omega + ka * alpha + kr * s2 * err
    # polar kinematics at the actual speeds, then the virtual-law rates
    q = v / rho * sa
    rho_d = v * ca
    alpha_d = omega - q
    vsd = -kr * (ca * rho_d - sa * alpha_d * rho)
    wsd = -ka * alpha_d - kr * (2.0 * s2p * alpha_d * err + s2 * (alpha_d - lam * q))
    # strict Lyapunov function and its gradient
    p11, p12, p22 = P[0, 0], P[0, 1], P[1, 1]
    V1 = 0.5 * (rho * rho + lam * phi * phi + alpha * alpha)
    V = g.nu * V1 + p11 * alpha * alpha + 2.0 * p12 * alpha * phi + p22 * phi * phi
    d_rho = g.nu * rho
    d_phi = g.nu * lam * phi + 2.0 * (p12 * alpha + p22 * phi)
    d_alpha = g.nu * alpha + 2.0 * (p11 * alpha + p12 * phi)
    ca2 = ca * ca
    LfV = -kr * ca2 * rho * d_rho - kr * s2 * alpha * d_phi + (-ka * alpha + lam * kr * s2 * phi) * d_alpha
    inv = 1.0 / (1.0 + V)
    Lf1 = (g.mu * inv * (d_rho * rho_d + d_phi * q + d_alpha * alpha_d)
           + z / g.k_z * (-vsd / rho + kr * ca2 * z - ca * z * z) - wt / g.k_omega * wsd)
    zz = z * z + wt * wt
    if rate_form == "positive":
        rate = -epsilon * LfV * inv + 0.5 * zz
    elif rate_form == "literal":
        rate = epsilon * LfV * inv - 0.5 * zz
    else:
        raise ValueError(f"unknown rate_form {rate_form!r}")
    s = Lf1 + rate
    b1 = -np.where(s >= 0, g.gamma * s, s)
    Vr = g.mu * np.log1p(V) + 0.5 * (z * z / g.k_z + wt * wt / g.k_omega)
    u1n = vsd - rho * (kr * ca2 * z - ca * z * z + g.k_z * z)
    u2n = wsd - g.k_omega * wt
    if barrier is None:
        nan = np.full(np.shape(rho), np.nan)
        a2x = a2y = b2 = np.zeros(np.shape(rho))
        h = B = nan
    else:
        h = np.asarray(barrier.h(x, y), float)
        H = barrier.H
        gh = barrier.grad_h(x, y)
        Hv = H[0, 0] * v + H[0, 1] * omega
        Hw = H[0, 1] * v + H[1, 1] * omega
        B = 1.0 / h + v * Hv + omega * Hw
        lf2 = -(gh[..., 0] * np.cos(theta) + gh[..., 1] * np.sin(theta)) * v / (h * h)
        a2x = 2.0 * Hv * rho
        a2y = 2.0 * Hw
        b2 = np.asarray(barrier.alpha_B(1.0 / B), float) - lf2
    return QpRows(rho, phi, alpha, z, wt, V1, V, Vr, LfV, Lf1, rate, z / g.k_z, wt / g.k_omega, b1,
                  a2x, a2y, b2, h, B, u1n, u2n)


def assemble_qp(chi: PolarErrorState, s, g: clf.Gains, L: clf.LyapunovData, spec: Optional[BarrierSpec],
                epsilon: float = EPSILON_DEFAULT) -> QpProblem:
    """Build the QP at a single state.

    ``chi`` must be the error state of ``s``; it is recomputed from ``s``
    and checked. Raises DomainError near the origin and UnsafeState if h <= 0.
    """
    from .cbf import _safe_h

    if spec is not None:
        _safe_h(spec, s.x, s.y)
    rows = qp_rows(s.x, s.y, s.theta, s.v, s.omega, g, L.P, spec, epsilon)
    mine = np.array([rows.rho, rows.phi, rows.alpha, rows.z, rows.omega_tilde], dtype=float)
    if not np.allclose(mine, chi.as_array(), rtol=1e-9, atol=1e-9):
        raise ValueError("chi does not match the Cartesian state")
    return QpProblem(rows.a1, float(rows.b1), rows.a2, float(rows.b2), g.m, g.gamma)


def pmn_solve(a1, b1) -> np.ndarray:
    """Minimum-norm u_bar with a1 . u_bar <= b1 (vectorized; zero if the row vanishes)."""
    a1 = np.atleast_2d(np.asarray(a1, float))
    b1 = np.atleast_1d(np.asarray(b1, float))
    n1 = np.einsum("ij,ij->i", a1, a1)
    active = (b1 < 0) & (n1 >= DEGENERATE_ROW ** 2)
    return np.where(active[:, None], (b1 / np.where(active, n1, 1.0))[:, None] * a1, 0.0)


def pmn_control(chi: PolarErrorState, s, g: clf.Gains, L: clf.LyapunovData,
                epsilon: float = EPSILON_DEFAULT) -> ControlInput:
    """Pointwise minimum-norm CLF controller (no barrier, no relaxation)."""
    p = assemble_qp(chi, s, g, L, None, epsilon)
    if np.dot(p.a1, p.a1) < DEGENERATE_ROW ** 2 and p.b1 < 0:
        log.warning("PMN: CLF row vanished with b1=%r < 0; returning zero input", p.b1)
    u = pmn_solve(p.a1, p.b1)[0]
    return ControlInput(float(chi.rho * u[0]), float(u[1]))


def safety_critical_control(chi: PolarErrorState, s, g: clf.Gains, L: clf.LyapunovData, spec: BarrierSpec,
                            epsilon: float = EPSILON_DEFAULT, rho_stop: float = 1e-3):
    """Solve the QP and convert u_bar back to physical accelerations.

    Inside the stopping ball the output is frozen at zero and no QP is solved
    (the returned diagnostics are then ``None``).
    """
    if chi.rho < rho_stop:
        return ControlInput(0.0, 0.0), None
    sol = solve_gamma_m_qp(assemble_qp(chi, s, g, L, spec, epsilon))
    return ControlInput(float(chi.rho * sol.u_bar[0]), float(sol.u_bar[1])), sol
