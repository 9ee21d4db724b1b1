"""Reciprocal control barrier functions built by integrator backstepping.

For a kinematic barrier ``B1 = 1/h`` and the velocity cascade
``(v, omega)' = (u1, u2)``, the lifted barrier is

    B(x, y, v, omega) = 1/h(x, y) + eta' H eta,   eta = (v, omega)

which is a CBF for the force-controlled robot because (v, omega) = 0 is a
safe virtual law for the driftless kinematics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import UnsafeState
from .model import _out

POLY_TERMS = ("1", "x", "y", "xx", "xy", "yy")


def _identity(s):
    return s


@dataclass(frozen=True)
class BarrierSpec:
    """Safe set ``h(x, y) > 0`` together with the velocity weight ``H``.

    ``h`` and ``grad_h`` must accept broadcastable arrays; ``grad_h`` returns
    shape ``(..., 2)``. ``alpha_B`` is the class-K rate, identity by default.
    """

    h: Callable
    grad_h: Callable
    H: np.ndarray = field(default_factory=lambda: np.eye(2))
    alpha_B: Callable = _identity
    coeffs: Optional[tuple] = None
    kappa: float = 1.0

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        if H.shape != (2, 2):
            raise ValueError("H must be 2x2")
        if not np.allclose(H, H.T, rtol=0, atol=0):
            raise ValueError("H must be symmetric")
        if np.min(np.linalg.eigvalsh(H)) <= 0:
            raise ValueError("H must be positive definite")
        object.__setattr__(self, "H", H)
        s = np.linspace(0.0, 10.0, 101)
        a = np.asarray(self.alpha_B(s), dtype=float)
        if a[0] != 0.0 or np.any(np.diff(a) <= 0):
            raise ValueError("alpha_B must vanish at 0 and be strictly increasing")

    @classmethod
    def polynomial(cls, coeffs: Sequence[float], H=None, kappa: float = 1.0) -> BarrierSpec:
        """h = c0 + c1 x + c2 y + c3 x^2 + c4 xy + c5 y^2 with alpha_B(s) = kappa*s."""
        c = tuple(float(v) for v in coeffs)
        if len(c) != 6:
            raise ValueError(f"expected 6 polynomial coefficients {POLY_TERMS}, got {len(c)}")
        if not kappa > 0:
            raise ValueError("kappa must be positive")
        c0, cx, cy, cxx, cxy, cyy = c

        def h(x, y):
            x, y = np.asarray(x, float), np.asarray(y, float)
            return _out(c0 + cx * x + cy * y + cxx * x * x + cxy * x * y + cyy * y * y)

        def grad_h(x, y):
            x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
            return np.stack([cx + 2 * cxx * x + cxy * y, cy + cxy * x + 2 * cyy * y], axis=-1)

        alpha_B = _identity if kappa == 1.0 else (lambda s: kappa * s)
        return cls(h=h, grad_h=grad_h, H=np.eye(2) if H is None else H, alpha_B=alpha_B,
                   coeffs=c, kappa=float(kappa))

    def check_gradient(self, x, y, step: float = 1e-6) -> float:
        """Largest relative error of ``grad_h`` against central differences."""
        x, y = np.asarray(x, float), np.asarray(y, float)
        fd = np.stack([(np.asarray(self.h(x + step, y)) - self.h(x - step, y)) / (2 * step),
                       (np.asarray(self.h(x, y + step)) - self.h(x, y - step)) / (2 * step)], axis=-1)
        an = self.grad_h(x, y)
        return float(np.max(np.linalg.norm(an - fd, axis=-1) / np.maximum(np.linalg.norm(fd, axis=-1), 1e-300)))


def example1_barrier() -> BarrierSpec:
    """h = 1 + x - 8y^2 with H = 0.1 I."""
    return BarrierSpec.polynomial((1.0, 1.0, 0.0, 0.0, 0.0, -8.0), H=0.1 * np.eye(2))


def example2_barrier() -> BarrierSpec:
    """h = 1 - x + 8y^2 with H = I."""
    return BarrierSpec.polynomial((1.0, -1.0, 0.0, 0.0, 0.0, 8.0), H=np.eye(2))


# Sampling boxes (x, y) around the two example obstacles, and the velocity box
# shared by both. Only points with h > 0 inside a box are used.
EXAMPLE_BOXES = {"example1": ((-1.0, 8.0), (-1.1, 1.1)),
                 "example2": ((-6.0, 1.0), (-5.0, 5.0))}
VELOCITY_BOX = ((-5.0, 5.0), (-5.0, 5.0))


def example_barrier(name: str) -> BarrierSpec:
    try:
        return {"example1": example1_barrier, "example2": example2_barrier}[name]()
    except KeyError:
        raise ValueError(f"unknown example geometry {name!r}") from None


def _safe_h(spec: BarrierSpec, x, y):
    h = np.asarray(spec.h(x, y), dtype=float)
    if np.any(h <= 0):
        raise UnsafeState(f"h(x, y) = {np.min(h)!r} <= 0")
    return h


def b1(spec: BarrierSpec, x, y):
    """Kinematic reciprocal barrier 1/h."""
    return _out(1.0 / _safe_h(spec, x, y))


def b1_grad(spec: BarrierSpec, x, y) -> np.ndarray:
    h = _safe_h(spec, x, y)
    return -spec.grad_h(x, y) / (h * h)[..., None]


def _quad(H, v, w):
    return H[0, 0] * v * v + 2.0 * H[0, 1] * v * w + H[1, 1] * w * w


def cascade_cbf(spec: BarrierSpec, s):
    """B = 1/h(x, y) + eta' H eta."""
    v, w = np.asarray(s.v, float), np.asarray(s.omega, float)
    return _out(1.0 / _safe_h(spec, s.x, s.y) + _quad(spec.H, v, w))


def cascade_cbf_grad(spec: BarrierSpec, s) -> np.ndarray:
    """Gradient of B over (x, y, v, omega)."""
    v, w = np.asarray(s.v, float), np.asarray(s.omega, float)
    H = spec.H
    gb1 = b1_grad(spec, s.x, s.y)
    tail = np.stack(np.broadcast_arrays(2 * (H[0, 0] * v + H[0, 1] * w), 2 * (H[0, 1] * v + H[1, 1] * w)), -1)
    gb1, tail = np.broadcast_arrays(gb1[..., :, None], tail[..., None, :])
    return np.concatenate([gb1[..., 0], tail[..., 0, :]], axis=-1)


def barrier_constraint_row(spec: BarrierSpec, s, rho):
    """CBF row ``a2 . u_bar <= b2`` over the scaled input u_bar = (u1/rho, u2).

    a2 = L_g2 B (the v-entry carries the factor rho) and
    b2 = alpha_B(1/B) - L_f2 B.
    """
    from .model import check_rho

    check_rho(rho)
    h = _safe_h(spec, s.x, s.y)
    th, v, w = (np.asarray(a, float) for a in (s.theta, s.v, s.omega))
    H = spec.H
    gh = spec.grad_h(s.x, s.y)
    B = 1.0 / h + _quad(H, v, w)
    lf2 = -(gh[..., 0] * v * np.cos(th) + gh[..., 1] * v * np.sin(th)) / (h * h)
    a2 = np.stack(np.broadcast_arrays(2 * (H[0, 0] * v + H[0, 1] * w) * np.asarray(rho, float),
                                      2 * (H[0, 1] * v + H[1, 1] * w)), -1)
    return a2, _out(spec.alpha_B(1.0 / B) - lf2)


@dataclass(frozen=True)
class BacksteppedBarrier:
    """Generic lift ``B(x1, x2) = B1(x1) + e' H e`` with ``e = x2 - x2_star(x1)``.

    ``f(x1)`` has shape (..., n) and ``g(x1)`` shape (..., n, m). In the
    coordinates (x1, e) the cascade reads x1' = f + g x2* + g e, e' = u~, so
    L_G B = 2 e' H and L_F B = grad B1 . (f + g x2* + g e).
    """

    b1: Callable
    grad_b1: Callable
    f: Callable
    g: Callable
    H: np.ndarray
    x2_star: Optional[Callable] = None
    alpha_B: Callable = _identity

    def _e(self, x1, x2):
        x2 = np.asarray(x2, float)
        return x2 if self.x2_star is None else x2 - self.x2_star(x1)

    def value(self, x1, x2):
        e = self._e(x1, x2)
        return self.b1(x1) + np.einsum("...i,ij,...j->...", e, self.H, e)

    def lie_G(self, x1, x2) -> np.ndarray:
        return 2.0 * self._e(x1, x2) @ self.H

    def lie_F(self, x1, x2):
        x2 = np.asarray(x2, float)
        gx = self.g(x1)
        flow = self.f(x1) + np.einsum("...ij,...j->...i", gx, x2)
        return np.sum(self.grad_b1(x1) * flow, axis=-1)

    def condition(self, x1, x2):
        """L_F B - alpha_B(1/B); must be negative wherever L_G B = 0."""
        return self.lie_F(x1, x2) - self.alpha_B(1.0 / self.value(x1, x2))


def unicycle_backstepped(spec: BarrierSpec) -> BacksteppedBarrier:
    """The robot instance: x1 = (x, y, theta), x2 = (v, omega), zero virtual law."""

    def _b1(x1):
        return 1.0 / _safe_h(spec, x1[..., 0], x1[..., 1])

    def _grad_b1(x1):
        gb = b1_grad(spec, x1[..., 0], x1[..., 1])
        return np.concatenate([gb, np.zeros(gb.shape[:-1] + (1,))], axis=-1)

    def _f(x1):
        return np.zeros(np.shape(x1))

    def _g(x1):
        th = np.asarray(x1, float)[..., 2]
        z, o = np.zeros_like(th), np.ones_like(th)
        return np.stack([np.stack([np.cos(th), z], -1), np.stack([np.sin(th), z], -1),
                         np.stack([z, o], -1)], -2)

    return BacksteppedBarrier(_b1, _grad_b1, _f, _g, spec.H, None, spec.alpha_B)


@dataclass
class BacksteppingReport:
    n_points: int = 0
    n_slice: int = 0
    iff_mismatches: int = 0
    slice_worst: float = -np.inf
    slice_identity_err: float = 0.0
    violations: int = 0

    @property
    def ok(self) -> bool:
        return self.iff_mismatches == 0 and self.violations == 0 and self.slice_worst < 0


def verify_backstepping_condition(spec: BarrierSpec, xs, ys, vs, ws, theta: float = 0.0) -> BacksteppingReport:
    """Check the backstepping CBF condition on the product grid xs x ys x vs x ws.

    Grid points with h <= 0 are skipped. Checks that L_G B = 0 exactly when
    eta = 0 and that on eta = 0 the condition L_F B - alpha_B(1/B) equals
    -alpha_B(h) < 0.
    """
    X, Y = np.meshgrid(np.asarray(xs, float), np.asarray(ys, float), indexing="ij")
    safe = np.asarray(spec.h(X, Y)) > 0
    x1 = np.stack([X[safe], Y[safe], np.full(int(safe.sum()), float(theta))], axis=-1)
    lifted = unicycle_backstepped(spec)
    alpha_h = spec.alpha_B(np.asarray(spec.h(x1[:, 0], x1[:, 1])))
    rep = BacksteppingReport()
    for v in np.asarray(vs, float):
        for w in np.asarray(ws, float):
            x2 = np.broadcast_to(np.array([v, w]), (len(x1), 2))
            lgb = lifted.lie_G(x1, x2)
            zero_lgb = np.all(lgb == 0.0, axis=-1)
            rep.n_points += len(x1)
            rep.iff_mismatches += int(np.sum(zero_lgb != (v == 0.0 and w == 0.0)))
            if v == 0.0 and w == 0.0:
                cond = lifted.condition(x1, x2)
                rep.n_slice += len(x1)
                rep.violations += int(np.sum(cond >= 0))
                rep.slice_worst = max(rep.slice_worst, float(np.max(cond)))
                rep.slice_identity_err = max(rep.slice_identity_err, float(np.max(np.abs(cond + alpha_h))))
    return rep
