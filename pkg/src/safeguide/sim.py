"""Closed-loop simulation of the force-controlled unicycle.

The integrator advances a batch of states ``(N, 5)`` at once; a single
:func:`run` is a batch of one. Controllers are evaluated on whole batches, so
sweeps over many initial conditions cost little more than one run.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import clf
from .cbf import BarrierSpec
from .errors import ConfigError
from .model import RHO_MIN, CartesianState
from .qp import (BOTH, CBF, CLF, EMPTY, EPSILON_DEFAULT, STATUS_CLF_FAULT, STATUS_INFEASIBLE,
                 pmn_solve, qp_rows, solve_components)

CONTROLLERS = ("nominal", "pmn", "qp")
HOLDS = ("zoh", "stage")
CSV_COLUMNS = ("t", "x", "y", "theta", "v", "omega", "u1", "u2", "rho", "phi", "alpha", "z",
               "omega_tilde", "V1", "Vr", "h", "B", "qp_status")
CONVERGED_RHO = 0.05
STALL_PROGRESS = 0.02   # max spread of rho over the final second for a stalled run
RUN_CLASSES = ("violation", "infeasible", "error", "converged", "stalled", "unconverged")

# per-sample status codes
ST_NOMINAL, ST_PMN, ST_FROZEN, ST_CLF_FAULT, ST_INFEASIBLE = 10, 11, 12, 13, 14
STATUS_NAMES = {EMPTY: "empty", CLF: "clf", CBF: "cbf", BOTH: "both", ST_NOMINAL: "nominal",
                ST_PMN: "pmn", ST_FROZEN: "frozen", ST_CLF_FAULT: "clf_fault", ST_INFEASIBLE: "infeasible"}


@dataclass(frozen=True)
class Scenario:
    """One closed-loop run.

    For ``controller="qp"`` the barrier is enforced and a crossing aborts the
    run; for the other controllers it is only monitored.
    """

    initial_state: CartesianState
    gains: clf.Gains = field(default_factory=clf.Gains)
    barrier: Optional[BarrierSpec] = None
    controller: str = "qp"
    t_final: float = 20.0
    dt: float = 1e-3
    rho_stop: float = 1e-3
    epsilon: float = EPSILON_DEFAULT
    seed: int = 0
    hold: str = "zoh"
    name: str = ""

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}, got {self.controller!r}")
        if self.hold not in HOLDS:
            raise ConfigError(f"hold must be one of {HOLDS}, got {self.hold!r}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not self.t_final >= self.dt:
            raise ConfigError("t_final must be at least dt")
        if not self.rho_stop > RHO_MIN:
            raise ConfigError(f"rho_stop must exceed {RHO_MIN}")
        if not 0 < self.epsilon:
            raise ConfigError("epsilon must be positive")
        if self.controller != "nominal" and not self.epsilon < self.gains.mu:
            raise ConfigError(f"epsilon ({self.epsilon}) must be smaller than mu ({self.gains.mu})")
        if self.controller == "qp" and self.barrier is None:
            raise ConfigError("the qp controller needs a barrier")
        if self.barrier is not None:
            s = self.initial_state
            if not float(self.barrier.h(s.x, s.y)) > 0:
                raise ConfigError("initial state unsafe: h(x0, y0) <= 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_final / self.dt))


# ---------------------------------------------------------------- controllers

N_CHANNELS = len(CSV_COLUMNS) - 2   # everything except t and qp_status


@dataclass
class _Control:
    u: np.ndarray          # (N, 2) physical input
    status: np.ndarray     # (N,) int codes
    kkt: np.ndarray        # (N,) max KKT residual (0 when no QP is solved)
    channels: np.ndarray   # (N, N_CHANNELS) logged quantities, columns x..B


def _kkt_components(r, u, d, lam, m):
    l1, l2 = lam[:, 0], lam[:, 1]
    st = np.maximum.reduce([np.abs(u[:, 0] + l1 * r.a1x + l2 * r.a2x), np.abs(u[:, 1] + l1 * r.a1y + l2 * r.a2y),
                            np.abs(m * d[:, 0] + l1 * r.a1x), np.abs(m * d[:, 1] + l1 * r.a1y)])
    f1 = r.a1x * (u[:, 0] + d[:, 0]) + r.a1y * (u[:, 1] + d[:, 1]) - r.b1
    f2 = r.a2x * u[:, 0] + r.a2y * u[:, 1] - r.b2
    return np.maximum.reduce([st, f1, f2, np.abs(l1 * f1), np.abs(l2 * f2), -l1, -l2, np.zeros_like(l1)])


def evaluate_control(X: np.ndarray, sc: Scenario, P: np.ndarray) -> _Control:
    """Controller output and logged channels for states ``X`` of shape (N, 5)."""
    n = X.shape[0]
    g = sc.gains
    x, y, th, v, w = X.T
    u = np.zeros((n, 2))
    status = np.full(n, ST_FROZEN)
    kkt = np.zeros(n)
    ch = np.full((n, N_CHANNELS), np.nan)
    ch[:, :5] = X
    rho = np.hypot(x, y)
    ok = rho > RHO_MIN
    allok = bool(ok.all())
    if not allok:
        x, y, th, v, w = X[ok].T
    r = qp_rows(x, y, th, v, w, g, P, sc.barrier, sc.epsilon, check=False)
    sel = slice(None) if allok else ok
    ch[sel, 7:] = np.stack([r.rho, r.phi, r.alpha, r.z, r.omega_tilde, r.V1, r.Vr, r.h, r.B], axis=-1)
    live = r.rho >= sc.rho_stop
    if sc.controller == "nominal":
        u1, u2 = r.u1_nominal, r.u2_nominal
        st = np.full(r.rho.shape, ST_NOMINAL)
    elif sc.controller == "pmn":
        ub = pmn_solve(np.stack([r.a1x, r.a1y], -1), r.b1)
        u1, u2 = r.rho * ub[:, 0], ub[:, 1]
        st = np.where((r.a1x ** 2 + r.a1y ** 2 < 1e-24) & (r.b1 < 0), ST_CLF_FAULT, ST_PMN)
    else:
        ub, d, lam, active, qst = solve_components(r.a1x, r.a1y, r.b1, r.a2x, r.a2y, r.b2, g.m)
        u1, u2 = r.rho * ub[:, 0], ub[:, 1]
        st = np.where(qst == STATUS_INFEASIBLE, ST_INFEASIBLE,
                      np.where(qst == STATUS_CLF_FAULT, ST_CLF_FAULT, active))
        kk = np.where(live, _kkt_components(r, ub, d, lam, g.m), 0.0)
        if allok:
            kkt = kk
        else:
            kkt[ok] = kk
    u1 = np.where(live, u1, 0.0)
    u2 = np.where(live, u2, 0.0)
    st = np.where(live, st, ST_FROZEN)
    if allok:
        u[:, 0], u[:, 1], status = u1, u2, st
    else:
        u[ok, 0], u[ok, 1], status[ok] = u1, u2, st
    ch[:, 5:7] = u
    return _Control(u, status, kkt, ch)


def _deriv(X: np.ndarray, U: np.ndarray) -> np.ndarray:
    th, v = X[:, 2], X[:, 3]
    return np.stack([v * np.cos(th), v * np.sin(th), X[:, 4], U[:, 0], U[:, 1]], axis=-1)


def _rk4(X, ctrl, dt):
    k1 = _deriv(X, ctrl(X))
    k2 = _deriv(X + 0.5 * dt * k1, ctrl(X + 0.5 * dt * k1))
    k3 = _deriv(X + 0.5 * dt * k2, ctrl(X + 0.5 * dt * k2))
    k4 = _deriv(X + dt * k3, ctrl(X + dt * k3))
    return X + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def step_rk4(s: CartesianState, u, dt: float) -> CartesianState:
    """One classical RK4 step of the open-loop dynamics with ``u`` held constant."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if getattr(u, "scaled", False):
        raise ValueError("step_rk4 expects a physical input")
    X = np.atleast_2d(s.as_array())
    U = np.broadcast_to(np.asarray(u.as_array() if hasattr(u, "as_array") else u, float), (X.shape[0], 2))
    out = _rk4(X, lambda Y: U, dt)
    return CartesianState.from_array(out[0] if np.ndim(s.x) == 0 else out)


# ----------------------------------------------------------------- integration

@dataclass
class Trajectory:
    """Column-oriented record of a run; ``columns`` follows :data:`CSV_COLUMNS`."""

    columns: dict
    kkt: np.ndarray
    controller: str
    dt: float
    violation: Optional[tuple] = None
    converged_at: Optional[float] = None
    error: Optional[str] = None
    h_crossing: Optional[float] = None
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.columns["t"])

    @property
    def status(self) -> str:
        if self.error is not None:
            return "error"
        if self.violation is not None:
            return self.violation[1]
        return "ok"

    def samples(self):
        """Iterate samples as dicts keyed by :data:`CSV_COLUMNS`."""
        for i in range(len(self)):
            yield {k: (self.columns[k][i] if k == "qp_status" else float(self.columns[k][i]))
                   for k in CSV_COLUMNS}

    def final_rho(self) -> float:
        return float(self.columns["rho"][-1])

    def min_h(self) -> Optional[float]:
        return self.metadata.get("min_h")


_VIOLATION_KINDS = {1: "safety_violation", 2: "qp_infeasible"}


def run(sc: Scenario, record: bool = True) -> Trajectory:
    """Integrate ``sc`` from t = 0 to ``t_final``, or until it converges or fails."""
    return integrate_batch(np.atleast_2d(sc.initial_state.as_array()), sc, record=record)[0]


def integrate_batch(X0: np.ndarray, sc: Scenario, record: bool = False) -> list:
    """Advance a batch of initial states under the scenario's settings.

    Returns one :class:`Trajectory` per row of ``X0`` (the scenario's own
    initial state is ignored). With ``record=False`` each trajectory holds
    only its last sample; ``metadata`` always carries ``min_h``, ``t_end``
    and ``rho_progress_last_1s`` (spread of rho over the final second).
    """
    g = sc.gains
    P = clf.solve_lyapunov_P(g)
    X = np.array(X0, dtype=float).reshape(-1, 5)
    n = X.shape[0]
    nsteps = sc.n_steps
    dt = sc.dt
    enforce = sc.controller == "qp"
    alive = np.ones(n, bool)
    last_k = np.full(n, nsteps)
    viol_kind = np.zeros(n, int)
    viol_t = np.full(n, np.nan)
    conv_t = np.full(n, np.nan)
    cross_t = np.full(n, np.nan)
    nonfinite = np.zeros(n, bool)
    min_h = np.full(n, np.inf)
    tail_len = max(1, int(round(1.0 / dt)))
    ring = np.full((tail_len, n), np.nan)
    if record:
        rec = np.full((nsteps + 1, n, N_CHANNELS), np.nan)
        rec_st = np.full((nsteps + 1, n), ST_FROZEN)
        rec_kkt = np.zeros((nsteps + 1, n))
    final = np.full((n, N_CHANNELS), np.nan)
    final_st = np.full(n, ST_FROZEN)

    def control_fn(Y):
        return evaluate_control(Y, sc, P).u

    for k in range(nsteps + 1):
        t = k * dt
        ids = np.nonzero(alive)[0]
        if ids.size == 0:
            break
        Xa = X[ids]
        fin = np.isfinite(Xa).all(axis=1)
        if not fin.all():
            bad = ids[~fin]
            nonfinite[bad] = True
            alive[bad] = False
            last_k[bad] = k
            ids, Xa = ids[fin], Xa[fin]
            if ids.size == 0:
                break
        ctl = evaluate_control(Xa, sc, P)
        rho = ctl.channels[:, 7]
        if record:
            rec[k, ids] = ctl.channels
            rec_st[k, ids] = ctl.status
            rec_kkt[k, ids] = ctl.kkt
        final[ids] = ctl.channels
        final_st[ids] = ctl.status
        ring[k % tail_len, ids] = rho
        stop = rho < sc.rho_stop
        if sc.barrier is not None:
            h = ctl.channels[:, 14]
            min_h[ids] = np.minimum(min_h[ids], h)
            unsafe = h <= 0
            newc = unsafe & np.isnan(cross_t[ids])
            cross_t[ids[newc]] = t
        else:
            unsafe = np.zeros(ids.size, bool)
        infeasible = ctl.status == ST_INFEASIBLE
        if enforce:
            first = unsafe & (viol_kind[ids] == 0)
            viol_kind[ids[first]], viol_t[ids[first]] = 1, t
        first = infeasible & (viol_kind[ids] == 0)
        viol_kind[ids[first]], viol_t[ids[first]] = 2, t
        newconv = stop & np.isnan(conv_t[ids])
        conv_t[ids[newconv]] = t
        done = stop | infeasible | (unsafe & enforce) | (k == nsteps)
        alive[ids[done]] = False
        last_k[ids[done]] = k
        step = ~done
        if not step.any():
            continue
        sid = ids[step]
        if sc.hold == "zoh":
            U = ctl.u[step]
            X[sid] = _rk4(X[sid], lambda Y: U, dt)
        else:
            X[sid] = _rk4(X[sid], control_fn, dt)

    out = []
    for j in range(n):
        kend = last_k[j]
        if record:
            arr = rec[:kend + 1, j]
            st = rec_st[:kend + 1, j]
            kk = rec_kkt[:kend + 1, j]
            t = np.arange(kend + 1) * dt
        else:
            arr, st, kk = final[j:j + 1], final_st[j:j + 1], np.zeros(1)
            t = np.array([kend * dt])
        columns = {"t": t}
        columns.update({name: arr[:, i] for i, name in enumerate(CSV_COLUMNS[1:-1])})
        columns["qp_status"] = [STATUS_NAMES[int(s)] for s in st]
        tr = ring[:, j]
        tr = tr[np.isfinite(tr)]
        meta = {"min_h": float(min_h[j]) if np.isfinite(min_h[j]) else None,
                "t_end": float(kend * dt),
                "rho_progress_last_1s": float(tr.max() - tr.min()) if tr.size else 0.0}
        out.append(Trajectory(
            columns, kk, sc.controller, dt,
            violation=(float(viol_t[j]), _VIOLATION_KINDS[viol_kind[j]]) if viol_kind[j] else None,
            converged_at=None if np.isnan(conv_t[j]) else float(conv_t[j]),
            error="non-finite state" if nonfinite[j] else None,
            h_crossing=None if np.isnan(cross_t[j]) else float(cross_t[j]),
            metadata=meta))
    return out


def classify(tr: Trajectory) -> str:
    """Sort a finished run into one of :data:`RUN_CLASSES`.

    A run that ends away from the origin while rho has barely moved during
    its final second is ``stalled`` (an undesirable equilibrium of the QP);
    one that is still moving is ``unconverged``.
    """
    if tr.error is not None:
        return "error"
    if tr.violation is not None:
        return "violation" if tr.violation[1] == "safety_violation" else "infeasible"
    if tr.final_rho() < CONVERGED_RHO:
        return "converged"
    if tr.metadata.get("rho_progress_last_1s", np.inf) < STALL_PROGRESS:
        return "stalled"
    return "unconverged"


# ----------------------------------------------------------------- monitoring

@dataclass
class MonitorReport:
    barrier: Optional[dict] = None
    lyapunov: Optional[dict] = None
    kkt: Optional[dict] = None
    continuity: Optional[dict] = None
    breaches: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.breaches

    def as_dict(self) -> dict:
        return {"barrier": self.barrier, "lyapunov": self.lyapunov, "kkt": self.kkt,
                "continuity": self.continuity, "breaches": list(self.breaches), "ok": self.ok}


def monitor_invariants(tr: Trajectory, g: clf.Gains, L: clf.LyapunovData, spec: Optional[BarrierSpec],
                       rho_stop: float = 1e-3, kkt_tol: float = 1e-8, jump_bound: float = 1.0) -> MonitorReport:
    """Per-sample checks on a recorded trajectory.

    ``g`` and ``L`` are accepted for symmetry with the other checks; the
    recorded Vr channel already uses them.
    """
    if len(tr) == 0:
        raise ValueError("empty trajectory")
    c = tr.columns
    rep = MonitorReport()
    if spec is not None:
        h = c["h"]
        bad = np.nonzero(h <= 0)[0]
        rep.barrier = {"min_h": float(np.min(h)), "n_unsafe": int(bad.size),
                       "first_crossing": float(c["t"][bad[0]]) if bad.size else None}
        if bad.size:
            rep.breaches.append(f"h <= 0 at t={c['t'][bad[0]]:.6g}")
    if tr.controller == "nominal":
        outside = c["rho"][:-1] >= rho_stop
        dVr = np.diff(c["Vr"])
        tol = 1e-6 * tr.dt
        inc = np.nonzero(outside & (dVr > tol))[0]
        rep.lyapunov = {"max_increase": float(np.max(dVr[outside])) if outside.any() else None,
                        "n_increase": int(inc.size)}
        if inc.size:
            rep.breaches.append(f"Vr increased at t={c['t'][inc[0]]:.6g}")
    if tr.controller == "qp":
        rep.kkt = {"max_residual": float(np.max(tr.kkt)) if tr.kkt.size else 0.0}
        if rep.kkt["max_residual"] > kkt_tol:
            rep.breaches.append(f"KKT residual {rep.kkt['max_residual']:.3g} > {kkt_tol:g}")
    if len(tr) > 1:
        # jumps are measured relative to the input's own scale: |du| / (1 + |u|)
        mag = np.hypot(c["u1"], c["u2"])
        du = np.hypot(np.diff(c["u1"]), np.diff(c["u2"])) / (1.0 + np.maximum(mag[:-1], mag[1:]))
        st = c["qp_status"]
        same = np.array([a == b for a, b in zip(st[:-1], st[1:])])
        smooth = same & (c["rho"][1:] >= rho_stop)
        jumps = np.nonzero(smooth & (du > jump_bound))[0]
        rep.continuity = {"max_rel_jump": float(np.max(du[smooth])) if smooth.any() else 0.0,
                          "max_rel_jump_at_switch": float(np.max(du[~same])) if (~same).any() else 0.0,
                          "n_jumps": int(jumps.size), "bound": jump_bound}
        if jumps.size:
            rep.breaches.append(f"relative input jump {du[jumps[0]]:.3g} at t={c['t'][jumps[0] + 1]:.6g}")
    return rep
