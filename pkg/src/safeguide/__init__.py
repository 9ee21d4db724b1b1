"""Safety-critical stabilization of a force-controlled unicycle.

A nominal polar-coordinate controller, strict Lyapunov functions used as
CLFs, reciprocal barrier functions lifted by backstepping, and the
closed-form gamma-m QP that merges them, plus a batch RK4 simulator.
"""
from .cbf import BarrierSpec, cascade_cbf, example1_barrier, example2_barrier
from .clf import Gains, LyapunovData, composite_Vr, lyapunov_data, nominal_control
from .errors import (ConfigError, DomainError, Infeasible, SafeguideError, SafetyViolation, SingularSystem,
                     UnsafeState)
from .model import CartesianState, ControlInput, PolarErrorState, to_polar
from .qp import QpProblem, QpSolution, assemble_qp, pmn_control, safety_critical_control, solve_gamma_m_qp
from .sim import Scenario, Trajectory, monitor_invariants, run

__version__ = "0.1.0"
