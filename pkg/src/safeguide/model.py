"""Robot states, polar coordinates and the open-loop unicycle dynamics.

Every function accepts plain floats or equally-shaped numpy arrays, so the
same code path serves single evaluations and batched grids.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DomainError

RHO_MIN = 1e-9
RHO_STOP = 1e-3


def _out(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


def wrap_angle(a):
    """Wrap an angle into (-pi, pi]."""
    return _out(np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi))


class _Vector:
    """Mixin for small frozen records of floats (or broadcastable arrays)."""

    def __post_init__(self):
        for f in fields(self):
            val = getattr(self, f.name)
            if not np.all(np.isfinite(val)):
                raise ValueError(f"{type(self).__name__}.{f.name} must be finite, got {val!r}")

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(*(np.asarray(getattr(self, f.name), dtype=float)
                                              for f in fields(self))), axis=-1)

    @classmethod
    def from_array(cls, arr):
        arr = np.asarray(arr, dtype=float)
        return cls(*(_out(arr[..., i]) for i in range(arr.shape[-1])))

    def __iter__(self):
        return (getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class CartesianState(_Vector):
    """Pose and velocities of the robot. ``theta`` is kept unwrapped."""

    x: float
    y: float
    theta: float
    v: float
    omega: float

    @property
    def eta(self) -> np.ndarray:
        """Velocity sub-vector (v, omega)."""
        return np.array([self.v, self.omega])


@dataclass(frozen=True)
class PolarErrorState(_Vector):
    """Error coordinates chi = (rho, phi, alpha, z, omega_tilde)."""

    rho: float
    phi: float
    alpha: float
    z: float
    omega_tilde: float

    def __post_init__(self):
        super().__post_init__()
        if np.any(np.asarray(self.rho) < 0):
            raise ValueError("rho must be nonnegative")

    @property
    def xi(self) -> np.ndarray:
        return np.array([self.alpha, self.phi])

    @property
    def zeta(self) -> np.ndarray:
        return np.array([self.z, self.omega_tilde])


@dataclass(frozen=True)
class ControlInput(_Vector):
    """Acceleration inputs. With ``scaled=True`` the first entry is u1/rho."""

    u1: float
    u2: float
    scaled: bool = False

    def __post_init__(self):
        for name in ("u1", "u2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"ControlInput.{name} must be finite")

    def as_array(self) -> np.ndarray:
        return np.stack(np.broadcast_arrays(np.asarray(self.u1, float), np.asarray(self.u2, float)), axis=-1)

    def to_physical(self, rho) -> ControlInput:
        if not self.scaled:
            return self
        return ControlInput(_out(np.asarray(rho) * self.u1), self.u2)

    def to_scaled(self, rho) -> ControlInput:
        if self.scaled:
            return self
        return ControlInput(_out(self.u1 / np.asarray(rho)), self.u2, scaled=True)


def to_polar(s: CartesianState):
    """Return (rho, phi, alpha) with phi = atan2(y, x) and alpha wrapped to (-pi, pi].

    ``atan2(0, 0)`` is taken as 0, which numpy already does.
    """
    x, y = np.asarray(s.x, float), np.asarray(s.y, float)
    rho = np.hypot(x, y)
    phi = np.arctan2(y, x)
    alpha = wrap_angle(np.asarray(s.theta, float) - phi)
    return _out(rho), _out(phi), alpha


def from_polar(rho, phi, alpha):
    """Inverse of :func:`to_polar` on the pose: returns (x, y, theta)."""
    rho, phi, alpha = (np.asarray(a, float) for a in (rho, phi, alpha))
    return _out(rho * np.cos(phi)), _out(rho * np.sin(phi)), _out(alpha + phi)


def cartesian_dynamics(s: CartesianState, u: ControlInput) -> np.ndarray:
    """Time derivative (x', y', theta', v', omega') under physical input ``u``."""
    if u.scaled:
        raise ValueError("cartesian_dynamics expects a physical (unscaled) input")
    th = np.asarray(s.theta, float)
    v = np.asarray(s.v, float)
    return np.stack(np.broadcast_arrays(v * np.cos(th), v * np.sin(th),
                                        np.asarray(s.omega, float),
                                        np.asarray(u.u1, float), np.asarray(u.u2, float)), axis=-1)


def check_rho(rho, rho_min: float = RHO_MIN) -> None:
    if np.any(np.asarray(rho) <= rho_min):
        raise DomainError(f"rho={np.min(rho)!r} is at or below the floor {rho_min}")


def polar_kinematics(rho, phi, alpha, v, omega, rho_min: float = RHO_MIN):
    """Return (rho', phi', alpha') for the unicycle in polar coordinates."""
    check_rho(rho, rho_min)
    rho, alpha, v, omega = (np.asarray(a, float) for a in (rho, alpha, v, omega))
    s = v / rho * np.sin(alpha)
    return _out(v * np.cos(alpha)), _out(s), _out(omega - s)
