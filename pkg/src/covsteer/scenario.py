"""Scenario files: YAML with an explicit unit tag on every physical field.

Example::

    name: earth-mars-2d
    dimension: 2D            # 2D or 3D
    N: 40
    t_f: {value: 348.795, unit: day}
    mass_stochastic: true
    initial:
      r: {value: [-140699693, -51614428], unit: km}
      v: {value: [9.774596, -28.07828], unit: km/s}
      m: {value: 5000, unit: kg}
      sigma_r: {value: 10, unit: km}      # or var_r in km^2
      sigma_v: {value: 0.1, unit: km/s}   # or var_v in km^2/s^2
      sigma_m: {value: 0, unit: kg}       # or var_m in kg^2
    final:
      r: ...
      v: ...
      var_r / var_v / var_m or sigma_* as above
    physical:
      mu:    {value: 1.3271e11, unit: km^3/s^2}
      isp:   {value: 3000, unit: s}
      g0:    {value: 9.80665, unit: m/s^2}
      u_max: {value: 5, unit: N}
      gamma: {value: 9.0e-5, unit: kg*km/s^1.5}
    solver:                 # optional, any SolverConfig field
      d: 100
      terminal_covariance: upper-bound

Spread entries are a scalar (same for every axis) or one value per axis.
``sigma_*`` values are squared into variances.  A full covariance may be
given instead as ``covariance: {value: [[...]], units: [km, km, km/s, km/s, kg]}``
where entry ``(i, j)`` carries ``units[i] * units[j]``.  The final mass is
free and is never read.

Values are converted at ingest to km, s, kg and kg*km/s^2.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources

import numpy as np
import yaml

from covsteer.dynamics import AU_KM, DAY, NEWTON, PhysicalParams
from covsteer.steering import SolverConfig
from covsteer.tables import atomic_write

# unit tag -> (quantity, factor to internal units)
UNITS = {
    "km": ("length", 1.0),
    "m": ("length", 1e-3),
    "AU": ("length", AU_KM),
    "s": ("time", 1.0),
    "day": ("time", DAY),
    "km/s": ("speed", 1.0),
    "m/s": ("speed", 1e-3),
    "kg": ("mass", 1.0),
    "km/s^2": ("acceleration", 1.0),
    "m/s^2": ("acceleration", 1e-3),
    "N": ("force", NEWTON),
    "kN": ("force", 1.0),
    "kg*km/s^2": ("force", 1.0),
    "km^3/s^2": ("gravitational-parameter", 1.0),
    "m^3/s^2": ("gravitational-parameter", 1e-9),
    "kg*km/s^1.5": ("noise-intensity", 1.0),
    "N*s^0.5": ("noise-intensity", NEWTON),
    "km^2": ("length^2", 1.0),
    "m^2": ("length^2", 1e-6),
    "km^2/s^2": ("speed^2", 1.0),
    "m^2/s^2": ("speed^2", 1e-6),
    "kg^2": ("mass^2", 1.0),
}

_COMPONENT = {"r": "length", "v": "speed", "m": "mass"}
_SOLVER_KEYS = {"terminal_covariance": "terminal_covariance_mode"}
_SOLVER_FIELDS = {"beta_u", "p", "eps_Y", "eps_x", "eps_zeta", "d", "max_iterations",
                  "terminal_covariance_mode", "tau_init_fraction", "accept_inaccurate",
                  "initial_resolution", "substeps"}

PRESETS = ("earth-mars-2d", "earth-mars-3d", "earth-mars-3d-mass40")


class ScenarioError(ValueError):
    """Invalid scenario file; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class Scenario:
    """A complete transfer problem in km, s and kg.

    Attributes:
        name: label used in output files.
        dim: 2 (planar) or 3 (spatial).
        x_i: initial mean ``[r, v, m]``.
        x_f: final mean with ``nan`` as the (free) mass entry.
        P_i: initial covariance.
        P_f: terminal covariance, bound or target depending on ``config``.
        params: physical constants.
        t_f: time of flight in seconds.
        N: number of segments.
        config: SCP settings.
        mass_stochastic: carry the mass in the covariance dynamics.
    """

    name: str
    dim: int
    x_i: np.ndarray
    x_f: np.ndarray
    P_i: np.ndarray
    P_f: np.ndarray
    params: PhysicalParams
    t_f: float
    N: int
    config: SolverConfig = field(default_factory=SolverConfig)
    mass_stochastic: bool = True

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ScenarioError("dimension", f"must be 2D or 3D, got {self.dim}")
        n = 2 * self.dim + 1
        self.x_i = np.asarray(self.x_i, dtype=float)
        self.x_f = np.asarray(self.x_f, dtype=float)
        self.P_i = np.asarray(self.P_i, dtype=float)
        self.P_f = np.asarray(self.P_f, dtype=float)
        for name, shape in (("x_i", (n,)), ("x_f", (n,)), ("P_i", (n, n)), ("P_f", (n, n))):
            if getattr(self, name).shape != shape:
                raise ScenarioError(name, f"expected shape {shape}, got {getattr(self, name).shape}")
        if not np.all(np.isfinite(self.x_i)):
            raise ScenarioError("initial", "mean must be finite")
        if not self.x_i[-1] > 0:
            raise ScenarioError("initial.m", "initial mass must be positive")
        if not np.all(np.isfinite(self.x_f[:-1])):
            raise ScenarioError("final", "position and velocity must be finite")
        self.x_f[-1] = np.nan
        _check_psd("initial", self.P_i)
        _check_psd("final", self.P_f)
        if not self.t_f > 0:
            raise ScenarioError("t_f", "must be positive")
        if int(self.N) != self.N or self.N < 2:
            raise ScenarioError("N", f"must be an integer >= 2, got {self.N}")
        self.N = int(self.N)

    @property
    def n_x(self) -> int:
        return 2 * self.dim + 1

    @property
    def terminal_mass_variance(self) -> float:
        return float(self.P_f[-1, -1])

    def replace(self, **changes) -> "Scenario":
        return dataclasses.replace(self, **changes)


def _check_psd(path, P):
    if not np.all(np.isfinite(P)):
        raise ScenarioError(path, "covariance has non-finite entries")
    if not np.allclose(P, P.T, rtol=1e-12, atol=0.0):
        raise ScenarioError(path, "covariance is not symmetric")
    scale = max(float(np.max(np.abs(P))), 1e-300)
    lam = np.linalg.eigvalsh(P / scale)
    if lam.min() < -1e-12:
        raise ScenarioError(path, f"covariance is not positive semidefinite (eigenvalue {lam.min() * scale:.3e})")


def _quantity(node, path, kind, shape=None):
    """Read ``{value, unit}`` and convert to internal units."""
    if not isinstance(node, dict) or "value" not in node or "unit" not in node:
        raise ScenarioError(path, "expected a mapping with 'value' and 'unit'")
    unit = node["unit"]
    if unit not in UNITS:
        raise ScenarioError(path, f"unknown unit {unit!r}")
    got, factor = UNITS[unit]
    if got != kind:
        raise ScenarioError(path, f"unit {unit!r} is a {got}, expected a {kind}")
    try:
        value = np.asarray(node["value"], dtype=float) * factor
    except (TypeError, ValueError):
        raise ScenarioError(path, "value is not numeric") from None
    if shape is not None and value.shape != shape:
        raise ScenarioError(path, f"expected shape {shape}, got {value.shape}")
    if not np.all(np.isfinite(value)):
        raise ScenarioError(path, "value is not finite")
    return value


def _require(block, key, path):
    if not isinstance(block, dict):
        raise ScenarioError(path, "expected a mapping")
    if key not in block:
        raise ScenarioError(f"{path}.{key}" if path else key, "missing field")
    return block[key]


def _spread(block, comp, axes, path):
    """Variances of one state component, from ``sigma_<comp>`` or ``var_<comp>``."""
    kind = _COMPONENT[comp]
    has_sigma, has_var = f"sigma_{comp}" in block, f"var_{comp}" in block
    if has_sigma and has_var:
        raise ScenarioError(f"{path}.sigma_{comp}", f"give either sigma_{comp} or var_{comp}, not both")
    if has_sigma:
        key = f"sigma_{comp}"
        v = _quantity(block[key], f"{path}.{key}", kind)
        if np.any(v < 0):
            raise ScenarioError(f"{path}.{key}", "standard deviations must be nonnegative")
        v = v ** 2
    elif has_var:
        key = f"var_{comp}"
        v = _quantity(block[key], f"{path}.{key}", kind + "^2")
        if np.any(v < 0):
            raise ScenarioError(f"{path}.{key}", "variances must be nonnegative")
    else:
        raise ScenarioError(f"{path}.var_{comp}", "missing field (or sigma_" + comp + ")")
    if v.ndim == 0:
        v = np.full(axes, float(v))
    if v.shape != (axes,):
        raise ScenarioError(f"{path}.{key}", f"expected a scalar or {axes} values")
    return v


def _covariance(block, dim, path):
    n = 2 * dim + 1
    if "covariance" in block:
        node = block["covariance"]
        cpath = f"{path}.covariance"
        if not isinstance(node, dict) or "value" not in node or "units" not in node:
            raise ScenarioError(cpath, "expected a mapping with 'value' and 'units'")
        units = node["units"]
        if not isinstance(units, list) or len(units) != n:
            raise ScenarioError(f"{cpath}.units", f"expected {n} unit tags")
        expected = ["length"] * dim + ["speed"] * dim + ["mass"]
        factors = np.empty(n)
        for i, (u, kind) in enumerate(zip(units, expected)):
            if u not in UNITS or UNITS[u][0] != kind:
                raise ScenarioError(f"{cpath}.units[{i}]", f"expected a {kind} unit, got {u!r}")
            factors[i] = UNITS[u][1]
        try:
            P = np.asarray(node["value"], dtype=float)
        except (TypeError, ValueError):
            raise ScenarioError(cpath, "value is not numeric") from None
        if P.shape != (n, n):
            raise ScenarioError(cpath, f"expected shape ({n}, {n}), got {P.shape}")
        P = P * np.multiply.outer(factors, factors)
    else:
        P = np.diag(np.concatenate([_spread(block, "r", dim, path), _spread(block, "v", dim, path),
                                    _spread(block, "m", 1, path)]))
    _check_psd(path, P)
    return P


def _solver_config(block) -> SolverConfig:
    if block is None:
        return SolverConfig()
    if not isinstance(block, dict):
        raise ScenarioError("solver", "expected a mapping")
    kwargs = {}
    for key, value in block.items():
        name = _SOLVER_KEYS.get(key, key)
        if name not in _SOLVER_FIELDS:
            raise ScenarioError(f"solver.{key}", "unknown solver setting")
        kwargs[name] = value
    try:
        return SolverConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ScenarioError("solver", str(exc)) from None


def scenario_from_dict(data: dict) -> Scenario:
    if not isinstance(data, dict):
        raise ScenarioError("<root>", "expected a mapping")
    tag = _require(data, "dimension", "")
    if tag not in ("2D", "3D"):
        raise ScenarioError("dimension", f"must be '2D' or '3D', got {tag!r}")
    dim = int(tag[0])
    initial = _require(data, "initial", "")
    final = _require(data, "final", "")
    x_i = np.concatenate([
        _quantity(_require(initial, "r", "initial"), "initial.r", "length", (dim,)),
        _quantity(_require(initial, "v", "initial"), "initial.v", "speed", (dim,)),
        [_quantity(_require(initial, "m", "initial"), "initial.m", "mass", ())],
    ])
    x_f = np.concatenate([
        _quantity(_require(final, "r", "final"), "final.r", "length", (dim,)),
        _quantity(_require(final, "v", "final"), "final.v", "speed", (dim,)),
        [np.nan],
    ])
    phys = _require(data, "physical", "")
    kinds = {"mu": "gravitational-parameter", "isp": "time", "g0": "acceleration",
             "u_max": "force", "gamma": "noise-intensity"}
    values = {k: float(_quantity(_require(phys, k, "physical"), f"physical.{k}", kind, ()))
              for k, kind in kinds.items()}
    try:
        params = PhysicalParams(**values)
    except ValueError as exc:
        raise ScenarioError("physical", str(exc)) from None
    N = _require(data, "N", "")
    if isinstance(N, bool) or not isinstance(N, int):
        raise ScenarioError("N", f"must be an integer, got {N!r}")
    stochastic = data.get("mass_stochastic", True)
    if not isinstance(stochastic, bool):
        raise ScenarioError("mass_stochastic", "must be true or false")
    return Scenario(
        name=str(data.get("name", "scenario")),
        dim=dim,
        x_i=x_i,
        x_f=x_f,
        P_i=_covariance(initial, dim, "initial"),
        P_f=_covariance(final, dim, "final"),
        params=params,
        t_f=float(_quantity(_require(data, "t_f", ""), "t_f", "time", ())),
        N=N,
        config=_solver_config(data.get("solver")),
        mass_stochastic=stochastic,
    )


def parse_scenario(path) -> Scenario:
    """Read and validate a scenario file.

    Args:
        path: YAML file in the layout documented in this module.

    Raises:
        ScenarioError: with the field path of the first problem found.
    """
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ScenarioError(str(path), f"not valid YAML: {exc}") from None
    return scenario_from_dict(data)


def load_preset(name: str) -> Scenario:
    """Load a bundled scenario (see :data:`PRESETS`)."""
    if name not in PRESETS:
        raise ScenarioError("preset", f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("covsteer").joinpath("presets", f"{name}.yaml").read_text()
    return scenario_from_dict(yaml.safe_load(text))


def _q(value, unit):
    value = np.asarray(value, dtype=float)
    return {"value": value.tolist() if value.ndim else float(value), "unit": unit}


def _spread_block(P, dim):
    n = 2 * dim + 1
    if np.count_nonzero(P - np.diag(np.diag(P))):
        units = ["km"] * dim + ["km/s"] * dim + ["kg"]
        return {"covariance": {"value": P.tolist(), "units": units}}
    d = np.diag(P)
    return {"var_r": _q(d[:dim], "km^2"), "var_v": _q(d[dim:2 * dim], "km^2/s^2"),
            "var_m": _q(d[n - 1], "kg^2")}


def scenario_to_dict(sc: Scenario) -> dict:
    dim = sc.dim
    cfg = sc.config
    solver = {name: getattr(cfg, name) for name in sorted(_SOLVER_FIELDS)}
    solver["terminal_covariance"] = solver.pop("terminal_covariance_mode")
    solver = {k: (float(v) if isinstance(v, float) else v) for k, v in solver.items()}
    return {
        "name": sc.name,
        "dimension": f"{dim}D",
        "N": sc.N,
        "t_f": _q(sc.t_f, "s"),
        "mass_stochastic": bool(sc.mass_stochastic),
        "initial": {"r": _q(sc.x_i[:dim], "km"), "v": _q(sc.x_i[dim:2 * dim], "km/s"),
                    "m": _q(sc.x_i[-1], "kg"), **_spread_block(sc.P_i, dim)},
        "final": {"r": _q(sc.x_f[:dim], "km"), "v": _q(sc.x_f[dim:2 * dim], "km/s"),
                  **_spread_block(sc.P_f, dim)},
        "physical": {"mu": _q(sc.params.mu, "km^3/s^2"), "isp": _q(sc.params.isp, "s"),
                     "g0": _q(sc.params.g0, "km/s^2"), "u_max": _q(sc.params.u_max, "kg*km/s^2"),
                     "gamma": _q(sc.params.gamma, "kg*km/s^1.5")},
        "solver": solver,
    }


def write_scenario(path, sc: Scenario):
    """Write ``sc`` in internal units so that parsing it back is exact."""
    atomic_write(path, yaml.safe_dump(scenario_to_dict(sc), sort_keys=False))
