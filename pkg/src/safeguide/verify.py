"""Numerical certificates for the clf, cbf and qp modules.

Each suite returns a list of :class:`Check` records. The QP suite compares
the closed-form solver with a generic iterative solver (Hildreth's dual
coordinate ascent) that knows nothing about the problem's structure.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import cbf, clf
from .model import CartesianState, PolarErrorState, cartesian_dynamics
from .qp import gamma_f, objective, qp_rows, solve_batch, solve_components

SUITES = ("clf", "cbf", "qp")


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    value: float
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.ok else 'FAIL'}  {self.name}: {self.value:.3e}  {self.detail}".rstrip()


# ----------------------------------------------------------------- oracles

def hildreth(Q, G, h, tol: float = 1e-15, max_iter: int = 200_000):
    """Solve ``min x'Qx/2 s.t. Gx <= h`` for a batch by dual coordinate ascent.

    Shapes: Q (N, n, n) positive definite, G (N, k, n), h (N, k). Returns
    ``(x, lam, iterations)``. Rows with a zero norm are handled naturally
    (their multiplier stays zero when feasible).
    """
    Q, G, h = (np.asarray(a, float) for a in (Q, G, h))
    Qinv_Gt = np.linalg.solve(Q, np.swapaxes(G, -1, -2))           # (N, n, k)
    M = G @ Qinv_Gt                                                 # (N, k, k)
    k = G.shape[1]
    diag = np.einsum("nii->ni", M)
    safe_diag = np.where(diag > 0, diag, 1.0)
    lam = np.zeros(h.shape)
    todo = np.arange(len(h))
    it = 0
    while todo.size and it < max_iter:
        it += 1
        Ms, hs, ds, ls = M[todo], h[todo], safe_diag[todo], lam[todo]
        old = ls.copy()
        for i in range(k):
            grad = np.einsum("nj,nj->n", Ms[:, i], ls) + hs[:, i]
            ls[:, i] = np.where(ds[:, i] > 0, np.maximum(0.0, ls[:, i] - grad / ds[:, i]), 0.0)
        lam[todo] = ls
        moved = np.max(np.abs(ls - old), axis=1) > tol * (1.0 + np.max(np.abs(ls), axis=1))
        todo = todo[moved]
    x = -np.einsum("nik,nk->ni", Qinv_Gt, lam)
    return x, lam, it


def central_gradient(f, X, step: float = 1e-6) -> np.ndarray:
    """Central differences of a batched scalar function ``f`` at ``X`` (N, d)."""
    X = np.asarray(X, float)
    out = np.empty_like(X)
    for j in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[j] = step
        out[:, j] = (np.asarray(f(X + e)) - np.asarray(f(X - e))) / (2 * step)
    return out


def rel_error(analytic, numeric) -> float:
    """Largest entrywise error, relative to max(1, |numeric|)."""
    analytic, numeric = np.asarray(analytic, float), np.asarray(numeric, float)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))


# ----------------------------------------------------------------- samplers

def sample_chi(rng, n, r_lo, r_hi, dim=5):
    """Random points with norm in [r_lo, r_hi] and both angle entries in (-pi, pi]."""
    out = np.empty((0, dim))
    while len(out) < n:
        d = rng.standard_normal((2 * n, dim))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rad = rng.uniform(r_lo, r_hi, 2 * n)
        p = d * rad[:, None]
        p[:, 0] = np.abs(p[:, 0])
        keep = (np.abs(p[:, 1]) < np.pi) & (np.abs(p[:, 2]) < np.pi) & (p[:, 0] > 1e-6)
        out = np.concatenate([out, p[keep]])
    return out[:n]


def sample_safe(rng, spec, box, n, margin: float = 1e-2):
    """Uniform points (x, y) in ``box`` with h > margin, plus velocities in VELOCITY_BOX."""
    (x0, x1), (y0, y1) = box
    pts = np.empty((0, 2))
    while len(pts) < n:
        p = rng.uniform((x0, y0), (x1, y1), size=(4 * n + 16, 2))
        pts = np.concatenate([pts, p[np.asarray(spec.h(p[:, 0], p[:, 1])) > margin]])
    (v0, v1), (w0, w1) = cbf.VELOCITY_BOX
    vel = rng.uniform((v0, w0), (v1, w1), size=(n, 2))
    theta = rng.uniform(-np.pi, np.pi, n)
    return np.column_stack([pts[:n], theta, vel])


# ----------------------------------------------------------------- clf suite

def _v1_identity(g, R, PH, AL):
    f = clf.closed_loop_drift(R, PH, AL, g)
    dV1 = np.sum(clf.weak_lyapunov_V1_grad(R, PH, AL, g) * f, axis=-1)
    closed = -g.k_rho * np.cos(AL) ** 2 * R ** 2 - g.k_alpha * AL ** 2
    return float(np.max(np.abs(dV1 - closed) / np.maximum(1.0, np.abs(closed))))


def check_clf(samples: int = 10_000, seed: int = 0, g: clf.Gains | None = None) -> list:
    g = g or clf.Gains()
    L = clf.lyapunov_data(g)
    rng = np.random.default_rng(seed)
    checks = []

    A, P = g.A, L.P
    res = float(np.max(np.abs(A.T @ P + P @ A + np.eye(2))))
    checks.append(Check("lyapunov equation residual", res <= 1e-10, res))

    ok, margin = clf.certify_mu(g, L)
    checks.append(Check(f"certify_mu (mu={g.mu:g}) worst Vr'/|chi|^2", ok, margin))

    chi = sample_chi(rng, samples, 1e-3, g.r)
    R, PH, AL, Z, W = chi.T
    err = _v1_identity(g, R, PH, AL)
    checks.append(Check("V1' identity along the virtual loop", err <= 1e-12, err))

    _, LfV, _ = clf.lie_derivatives_V(R, PH, AL, g, P)
    worst = float(np.max(LfV))
    checks.append(Check("V' < 0 along the virtual loop (max)", worst < 0, worst))

    rate = clf.Vr_rate_nominal(R, PH, AL, Z, W, g, P)
    worst = float(np.max(rate))
    checks.append(Check("Vr' < 0 along the nominal loop (max)", worst < 0, worst))

    checks += gradient_checks_clf(g, L, rng)
    return checks


def gradient_checks_clf(g, L, rng, n: int = 100) -> list:
    chi = sample_chi(rng, n, 0.05, g.r)
    p = chi[:, :3]
    out = []
    fd = central_gradient(lambda X: clf.weak_lyapunov_V1(*X.T, g), p)
    out.append(("V1", rel_error(clf.weak_lyapunov_V1_grad(*p.T, g), fd)))
    fd = central_gradient(lambda X: clf._strict_V(*X.T, g, L.P), p)
    out.append(("V", rel_error(clf._strict_V_grad(*p.T, g, L.P), fd)))
    fd = central_gradient(lambda X: clf.composite_Vr(PolarErrorState(*X.T), g, L), chi)
    out.append(("Vr", rel_error(clf.composite_Vr_grad(PolarErrorState(*chi.T), g, L), fd)))
    return [Check(f"gradient of {name} vs central differences", e <= 1e-6, e) for name, e in out]


# ----------------------------------------------------------------- cbf suite

def backstepping_grid(geometry: str = "example1", n_xy: int = 200, n_vel: int = 21):
    spec = cbf.example_barrier(geometry)
    (x0, x1), (y0, y1) = cbf.EXAMPLE_BOXES[geometry]
    (v0, v1), (w0, w1) = cbf.VELOCITY_BOX
    return cbf.verify_backstepping_condition(spec, np.linspace(x0, x1, n_xy), np.linspace(y0, y1, n_xy),
                                             np.linspace(v0, v1, n_vel), np.linspace(w0, w1, n_vel))


def check_cbf(samples: int = 100, seed: int = 0, geometries=("example1", "example2"),
              n_xy: int = 200, n_vel: int = 21) -> list:
    rng = np.random.default_rng(seed)
    checks = []
    for geo in geometries:
        rep = backstepping_grid(geo, n_xy, n_vel)
        checks.append(Check(f"{geo}: L_G B = 0 iff eta = 0 (mismatches)", rep.iff_mismatches == 0,
                            float(rep.iff_mismatches), f"{rep.n_points} points"))
        checks.append(Check(f"{geo}: L_F B - alpha_B(1/B) on eta = 0 (max)", rep.ok, rep.slice_worst,
                            f"{rep.violations} violations, identity error {rep.slice_identity_err:.1e}"))
        checks += gradient_checks_cbf(geo, rng, samples)
    return checks


def gradient_checks_cbf(geometry, rng, n: int = 100) -> list:
    spec = cbf.example_barrier(geometry)
    S = sample_safe(rng, spec, cbf.EXAMPLE_BOXES[geometry], n, margin=0.05)
    xy = S[:, :2]
    fd = central_gradient(lambda X: cbf.b1(spec, X[:, 0], X[:, 1]), xy)
    e1 = rel_error(cbf.b1_grad(spec, xy[:, 0], xy[:, 1]), fd)
    xyvw = S[:, [0, 1, 3, 4]]

    def B(X):
        return cbf.cascade_cbf(spec, CartesianState(X[:, 0], X[:, 1], 0.0 * X[:, 0], X[:, 2], X[:, 3]))

    fd = central_gradient(B, xyvw)
    e2 = rel_error(cbf.cascade_cbf_grad(spec, CartesianState(*S.T)), fd)
    return [Check(f"{geometry}: gradient of B1 vs central differences", e1 <= 1e-6, e1),
            Check(f"{geometry}: gradient of B vs central differences", e2 <= 1e-6, e2)]


# ----------------------------------------------------------------- qp suite

def random_qp_instances(rng, n):
    a1 = rng.standard_normal((n, 2))
    a2 = rng.standard_normal((n, 2))
    m = rng.choice([1.0, 2.0, 5.0], n)
    gamma = rng.choice([1.0, 1.5, 3.0], n)
    s = rng.standard_normal(n)
    b1 = -np.where(s >= 0, gamma * s, s)   # -gamma_f(s) with a per-instance gamma
    b2 = rng.standard_normal(n)
    return a1, b1, a2, b2, m


def qp_kkt(a1, b1, a2, b2, m, u, d, lam):
    l1, l2 = lam[:, 0], lam[:, 1]
    stat = np.max(np.abs(np.concatenate([u + l1[:, None] * a1 + l2[:, None] * a2,
                                         m[:, None] * d + l1[:, None] * a1], axis=1)), axis=1)
    f1 = np.sum(a1 * (u + d), axis=1) - b1
    f2 = np.sum(a2 * u, axis=1) - b2
    return np.max(np.stack([stat, np.maximum(f1, 0), np.maximum(f2, 0), np.maximum(-l1, 0),
                            np.maximum(-l2, 0), np.abs(l1 * f1), np.abs(l2 * f2)]), axis=0)


def qp_oracle(a1, b1, a2, b2, m):
    n = len(b1)
    Q = np.zeros((n, 4, 4))
    Q[:, 0, 0] = Q[:, 1, 1] = 1.0
    Q[:, 2, 2] = Q[:, 3, 3] = m
    G = np.zeros((n, 2, 4))
    G[:, 0, :2] = G[:, 0, 2:] = a1
    G[:, 1, :2] = a2
    x, lam, _ = hildreth(Q, G, np.column_stack([b1, b2]))
    return x[:, :2], x[:, 2:]


def check_qp(samples: int = 100_000, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    a1, b1, a2, b2, m = random_qp_instances(rng, samples)
    # the closed-form solver takes one m per call; group by m
    u, d, lam = np.empty((samples, 2)), np.empty((samples, 2)), np.empty((samples, 2))
    for mv in np.unique(m):
        i = m == mv
        u[i], d[i], lam[i], _, _ = solve_batch(a1[i], b1[i], a2[i], b2[i], mv)
    kkt = float(np.max(qp_kkt(a1, b1, a2, b2, m, u, d, lam))) if samples else 0.0
    checks = [Check(f"KKT residual over {samples} random problems (max)", kkt <= 1e-9, kkt)]
    if samples:
        uo, do = qp_oracle(a1, b1, a2, b2, m)
        ja, jo = objective(u, d, m), objective(uo, do, m)
        gap = float(np.max(np.abs(ja - jo) / (1.0 + np.abs(jo))))
    else:
        gap = 0.0
    checks.append(Check("objective gap vs iterative oracle (max, relative)", gap <= 1e-6, gap))

    g = clf.Gains()
    sel = g.gamma * g.m / (g.m + 1.0)
    checks.append(Check("gamma*m/(m+1) - 1", abs(sel - 1.0) < 1e-15, sel - 1.0))
    gf = (gamma_f(2.0, 1.5), gamma_f(-2.0, 1.5), gamma_f(0.0, 1.5))
    checks.append(Check("gamma_f examples", gf == (3.0, -2.0, 0.0), 0.0, repr(gf)))

    worst = cbf_slack_near_origin(g, rng, n=min(samples, 10_000) or 1)
    checks.append(Check("CBF row slack for |chi| <= 0.01, example1 (max F2)", worst < 0, worst))
    e = qp_row_derivative_error(g, rng)
    checks.append(Check("QP rows vs finite-difference time derivatives", e <= 1e-6, e))
    return checks


def cbf_slack_near_origin(g, rng, n: int = 10_000, radius: float = 0.01) -> float:
    """Largest F2 = a2 . u_bar - b2 at the QP solution over random |chi| <= radius."""
    P = clf.solve_lyapunov_P(g)
    spec = cbf.example1_barrier()
    chi = sample_chi(rng, n, 1e-4, radius)
    s = clf.state_from_error(PolarErrorState(*chi.T), g)
    r = qp_rows(s.x, s.y, s.theta, s.v, s.omega, g, P, spec)
    u, _, _, _, _ = solve_components(r.a1x, r.a1y, r.b1, r.a2x, r.a2y, r.b2, g.m)
    return float(np.max(r.a2x * u[:, 0] + r.a2y * u[:, 1] - r.b2))


def qp_row_derivative_error(g, rng, n: int = 100, step: float = 1e-6) -> float:
    """Check L_f1 Vr + a1 . u_bar and L_f2 B + a2 . u_bar against d/dt by central differences."""
    L = clf.lyapunov_data(g)
    spec = cbf.example1_barrier()
    S = sample_safe(rng, spec, cbf.EXAMPLE_BOXES["example1"], n, margin=0.05)
    S = S[np.hypot(S[:, 0], S[:, 1]) > 0.1]
    s = CartesianState(*S.T)
    r = qp_rows(*S.T, g, L.P, spec)
    ub = rng.standard_normal((len(S), 2))
    U = np.column_stack([r.rho * ub[:, 0], ub[:, 1]])
    from .model import ControlInput

    F = cartesian_dynamics(s, ControlInput(U[:, 0], U[:, 1]))
    plus, minus = CartesianState(*(S + step * F).T), CartesianState(*(S - step * F).T)

    def Vr(st):
        return clf.composite_Vr(clf.error_state(st, g), g, L)

    dVr = (Vr(plus) - Vr(minus)) / (2 * step)
    dB = (cbf.cascade_cbf(spec, plus) - cbf.cascade_cbf(spec, minus)) / (2 * step)
    an_V = r.Lf1 + r.a1x * ub[:, 0] + r.a1y * ub[:, 1]
    lf2 = spec.alpha_B(1.0 / r.B) - r.b2
    an_B = lf2 + r.a2x * ub[:, 0] + r.a2y * ub[:, 1]
    return max(rel_error(an_V, dVr), rel_error(an_B, dB))


def run_suite(name: str, samples: int | None = None, seed: int = 0) -> list:
    """Run one suite by name (``clf``, ``cbf``, ``qp`` or ``all``)."""
    if name == "all":
        return [c for s in SUITES for c in run_suite(s, samples, seed)]
    if name == "clf":
        return check_clf(samples or 10_000, seed)
    if name == "cbf":
        return check_cbf(samples or 100, seed)
    if name == "qp":
        return check_qp(100_000 if samples is None else samples, seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")
