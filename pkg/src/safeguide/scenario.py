"""TOML scenario files.

A file has the sections ``[robot]``, ``[gains]``, ``[barrier]``, ``[sim]``,
``[controller]`` and an optional ``[sweep]``; everything except ``[robot]``
may be omitted and falls back to the library defaults. Unknown keys are
rejected with the file and section they appear in.

Example::

    name = "example1"

    [robot]
    x = 7.0
    y = 0.63
    theta = 2.55
    v = -3.73
    omega = 4.13

    [barrier]
    coeffs = [1.0, 1.0, 0.0, 0.0, 0.0, -8.0]   # 1, x, y, x^2, xy, y^2
    H = [[0.1, 0.0], [0.0, 0.1]]
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np
import tomli
import tomli_w

from .cbf import BarrierSpec
from .clf import Gains
from .errors import ConfigError
from .model import CartesianState
from .sim import CONTROLLERS, HOLDS, Scenario

_NUMBER = (int, float)

# section -> {key: (kind, required)}; kinds are checked by _check_value
_SCHEMA = {
    "robot": {k: ("number", True) for k in ("x", "y", "theta", "v", "omega")},
    "gains": {f.name: ("number", False) for f in fields(Gains)},
    "barrier": {"coeffs": ("vector6", True), "H": ("matrix2", False), "kappa": ("number", False)},
    "sim": {"dt": ("number", False), "t_final": ("number", False), "rho_stop": ("number", False),
            "epsilon": ("number", False), "hold": ("string", False)},
    "controller": {"kind": ("string", True)},
    "sweep": {"count": ("int", False), "seed": ("int", False), "x": ("range", True), "y": ("range", True),
              "theta": ("range", False), "v": ("range", False), "omega": ("range", False),
              "h_margin": ("number", False), "rho_min": ("number", False)},
}
_TOP_LEVEL = {"name": "string"}

SWEEP_DEFAULTS = {"count": 200, "seed": 0, "theta": [-math.pi, math.pi], "v": [-5.0, 5.0],
                  "omega": [-5.0, 5.0], "h_margin": 0.05, "rho_min": 0.05}


def _is_number(x) -> bool:
    return isinstance(x, _NUMBER) and not isinstance(x, bool) and math.isfinite(x)


def _check_value(where: str, kind: str, val) -> None:
    ok = {
        "number": lambda: _is_number(val),
        "int": lambda: isinstance(val, int) and not isinstance(val, bool) and val >= 0,
        "string": lambda: isinstance(val, str),
        "vector6": lambda: isinstance(val, list) and len(val) == 6 and all(map(_is_number, val)),
        "matrix2": lambda: (isinstance(val, list) and len(val) == 2
                            and all(isinstance(r, list) and len(r) == 2 and all(map(_is_number, r)) for r in val)),
        "range": lambda: isinstance(val, list) and len(val) == 2 and all(map(_is_number, val)) and val[0] < val[1],
    }[kind]()
    if not ok:
        expected = {"number": "a finite number", "int": "a nonnegative integer", "string": "a string",
                    "vector6": "a list of 6 numbers", "matrix2": "a 2x2 list of numbers",
                    "range": "a list [low, high] with low < high"}[kind]
        raise ConfigError(f"{where}: expected {expected}, got {val!r}")


@dataclass
class ScenarioFile:
    """Validated contents of a scenario file, kept exactly as written."""

    name: str = ""
    robot: dict = field(default_factory=dict)
    gains: dict = field(default_factory=dict)
    barrier: Optional[dict] = None
    sim: dict = field(default_factory=dict)
    controller: dict = field(default_factory=lambda: {"kind": "qp"})
    sweep: Optional[dict] = None
    source: str = field(default="<memory>", compare=False)

    # -------------------------------------------------------------- parsing
    @classmethod
    def from_dict(cls, doc: dict, source: str = "<memory>") -> "ScenarioFile":
        doc = copy.deepcopy(doc)
        for key, val in doc.items():
            if key in _SCHEMA:
                if not isinstance(val, dict):
                    raise ConfigError(f"{source}: [{key}] must be a table")
                continue
            if key not in _TOP_LEVEL:
                raise ConfigError(f"{source}: unknown top-level key {key!r}")
            _check_value(f"{source}: {key}", _TOP_LEVEL[key], val)
        if "robot" not in doc:
            raise ConfigError(f"{source}: missing required section [robot]")
        for section, schema in _SCHEMA.items():
            table = doc.get(section)
            if table is None:
                continue
            for key, val in table.items():
                if key not in schema:
                    raise ConfigError(f"{source}: [{section}] unknown key {key!r}")
                _check_value(f"{source}: [{section}].{key}", schema[key][0], val)
            for key, (_, required) in schema.items():
                if required and key not in table:
                    raise ConfigError(f"{source}: [{section}] missing required key {key!r}")
        sf = cls(name=doc.get("name", ""), robot=doc["robot"], gains=doc.get("gains", {}),
                 barrier=doc.get("barrier"), sim=doc.get("sim", {}),
                 controller=doc.get("controller", {"kind": "qp"}), sweep=doc.get("sweep"), source=source)
        sf.to_scenario()   # revalidate every Scenario invariant now
        return sf

    @classmethod
    def loads(cls, text: str, source: str = "<string>") -> "ScenarioFile":
        try:
            doc = tomli.loads(text)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{source}: {exc}") from None
        return cls.from_dict(doc, source)

    @classmethod
    def load(cls, path) -> "ScenarioFile":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
        return cls.loads(text, str(path))

    # -------------------------------------------------------------- output
    def to_dict(self) -> dict:
        doc = {"name": self.name} if self.name else {}
        doc["robot"] = self.robot
        for key in ("gains", "barrier", "sim", "controller", "sweep"):
            val = getattr(self, key)
            if val:
                doc[key] = val
        return copy.deepcopy(doc)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def dump(self, path) -> None:
        Path(path).write_text(self.dumps())

    # -------------------------------------------------------------- objects
    def barrier_spec(self) -> Optional[BarrierSpec]:
        if self.barrier is None:
            return None
        b = self.barrier
        try:
            return BarrierSpec.polynomial(b["coeffs"], H=np.array(b.get("H", [[1.0, 0.0], [0.0, 1.0]])),
                                          kappa=b.get("kappa", 1.0))
        except ValueError as exc:
            raise ConfigError(f"{self.source}: [barrier] {exc}") from None

    def to_scenario(self) -> Scenario:
        try:
            gains = Gains(**{k: float(v) for k, v in self.gains.items()})
        except ValueError as exc:
            raise ConfigError(f"{self.source}: [gains] {exc}") from None
        kind = self.controller.get("kind", "qp")
        if kind not in CONTROLLERS:
            raise ConfigError(f"{self.source}: [controller].kind must be one of {CONTROLLERS}, got {kind!r}")
        hold = self.sim.get("hold", "zoh")
        if hold not in HOLDS:
            raise ConfigError(f"{self.source}: [sim].hold must be one of {HOLDS}, got {hold!r}")
        state = CartesianState(*(float(self.robot[k]) for k in ("x", "y", "theta", "v", "omega")))
        sim_kw = {k: float(v) for k, v in self.sim.items() if k != "hold"}
        seed = int(self.sweep.get("seed", 0)) if self.sweep else 0
        try:
            return Scenario(state, gains, self.barrier_spec(), kind, hold=hold, seed=seed,
                            name=self.name, **sim_kw)
        except ConfigError as exc:
            raise ConfigError(f"{self.source}: {exc}") from None

    def sweep_settings(self) -> dict:
        if self.sweep is None:
            raise ConfigError(f"{self.source}: no [sweep] section")
        return {**SWEEP_DEFAULTS, **self.sweep}


def sample_initial_states(sf: ScenarioFile, n: int, seed: int) -> np.ndarray:
    """Draw ``n`` initial states uniformly from the sweep box, keeping safe ones.

    A point is kept when h(x, y) > h_margin and rho > rho_min; the draw order
    is fixed, so a seed always yields the same states.
    """
    cfg = sf.sweep_settings()
    spec = sf.barrier_spec()
    lo = np.array([cfg[k][0] for k in ("x", "y", "theta", "v", "omega")], float)
    hi = np.array([cfg[k][1] for k in ("x", "y", "theta", "v", "omega")], float)
    rng = np.random.default_rng(seed)
    out = np.empty((0, 5))
    tries = 0
    while len(out) < n:
        tries += 1
        if tries > 1000:
            raise ConfigError(f"{sf.source}: [sweep] box has (almost) no safe points")
        P = rng.uniform(lo, hi, size=(max(n, 64), 5))
        keep = np.hypot(P[:, 0], P[:, 1]) > cfg["rho_min"]
        if spec is not None:
            keep &= np.asarray(spec.h(P[:, 0], P[:, 1])) > cfg["h_margin"]
        out = np.concatenate([out, P[keep]])
    return out[:n]


BUNDLED = ("example1", "example2", "example1_nominal_monitored")


def bundled_path(name: str) -> Path:
    """Path of a scenario shipped with the package."""
    if name not in BUNDLED:
        raise ConfigError(f"no bundled scenario {name!r}; choose from {BUNDLED}")
    return Path(str(resources.files("safeguide") / "scenarios" / f"{name}.toml"))


def resolve(path_or_name) -> Path:
    """Accept a file path, or the name of a bundled scenario."""
    p = Path(path_or_name)
    if p.exists() or str(path_or_name) not in BUNDLED:
        return p
    return bundled_path(str(path_or_name))
