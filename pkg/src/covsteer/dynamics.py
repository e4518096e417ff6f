"""Heliocentric two-body dynamics with a variable-mass spacecraft.

State layout is ``[r, v, m]`` with ``r`` and ``v`` of dimension 2 (planar,
``n_x = 5``) or 3 (spatial, ``n_x = 7``).  The control is the thrust vector.
Internal physical units are km, s and kg, so forces are expressed in
kg*km/s^2 (1 N = 1e-3 kg*km/s^2) and ``g0`` in km/s^2.

Every function accepts leading batch dimensions, e.g. states of shape
``(N, n_x)`` with controls ``(N, n_u)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AU_KM = 1.495978707e8
NEWTON = 1e-3  # kg*km/s^2
DAY = 86400.0
G0_KM_S2 = 9.80665e-3

NORM_SMOOTHING = 1e-8
RADIUS_FLOOR = 1e-3


class DynamicsError(ValueError):
    """Raised when the dynamics are evaluated outside their domain."""


class SingularRadiusError(DynamicsError):
    pass


class NonpositiveMassError(DynamicsError):
    pass


@dataclass(frozen=True)
class PhysicalParams:
    """Physical constants of the transfer.

    Attributes:
        mu: gravitational parameter of the central body.
        isp: specific impulse.
        g0: standard gravity used in the rocket equation.
        u_max: maximum thrust magnitude.
        gamma: force-level disturbance intensity (diffusion is ``gamma / m``).
    """

    mu: float
    isp: float
    g0: float
    u_max: float
    gamma: float

    def __post_init__(self):
        for name in ("mu", "isp", "g0", "u_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if not self.gamma >= 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")

    @property
    def exhaust_speed(self) -> float:
        return self.isp * self.g0


@dataclass(frozen=True)
class ScaleSet:
    """Characteristic units used to nondimensionalize a problem."""

    length: float = 1.0
    time: float = 1.0
    mass: float = 1.0

    def __post_init__(self):
        for name in ("length", "time", "mass"):
            if not getattr(self, name) > 0:
                raise ValueError(f"scale unit {name} must be strictly positive")

    @classmethod
    def canonical(cls, mu: float, mass: float, length: float = AU_KM) -> "ScaleSet":
        """Length unit ``length``, time unit chosen so that the scaled mu is 1."""
        return cls(length=length, time=float(np.sqrt(length**3 / mu)), mass=mass)

    @property
    def speed(self) -> float:
        return self.length / self.time

    @property
    def acceleration(self) -> float:
        return self.length / self.time**2

    @property
    def force(self) -> float:
        return self.mass * self.length / self.time**2

    def unit(self, kind: str) -> float:
        units = {
            "length": self.length,
            "time": self.time,
            "mass": self.mass,
            "speed": self.speed,
            "acceleration": self.acceleration,
            "force": self.force,
            "mu": self.length**3 / self.time**2,
            # force-level diffusion intensity, kg*km/s^1.5
            "gamma": self.mass * self.length / self.time**1.5,
        }
        try:
            return units[kind]
        except KeyError:
            raise ValueError(f"unknown quantity kind {kind!r}") from None

    def state_units(self, n_x: int) -> np.ndarray:
        """Per-component units of a state vector of size 5/7 (or 4/6 without mass)."""
        if n_x in (5, 7):
            d = (n_x - 1) // 2
            return np.array([self.length] * d + [self.speed] * d + [self.mass])
        if n_x in (4, 6):
            d = n_x // 2
            return np.array([self.length] * d + [self.speed] * d)
        raise ValueError(f"unsupported state dimension {n_x}")


def nondimensionalize(value, kind: str, scales: ScaleSet):
    """Convert a physical quantity to scaled units.

    ``kind`` is a quantity name understood by :meth:`ScaleSet.unit`, or
    ``"state"`` / ``"covariance"`` for full state vectors and matrices.
    """
    value = np.asarray(value, dtype=float)
    if kind == "state":
        return value / scales.state_units(value.shape[-1])
    if kind == "covariance":
        s = scales.state_units(value.shape[-1])
        return value / np.multiply.outer(s, s)
    return value / scales.unit(kind)


def dimensionalize(value, kind: str, scales: ScaleSet):
    """Inverse of :func:`nondimensionalize`."""
    value = np.asarray(value, dtype=float)
    if kind == "state":
        return value * scales.state_units(value.shape[-1])
    if kind == "covariance":
        s = scales.state_units(value.shape[-1])
        return value * np.multiply.outer(s, s)
    return value * scales.unit(kind)


def scale_params(params: PhysicalParams, scales: ScaleSet) -> PhysicalParams:
    return PhysicalParams(
        mu=params.mu / scales.unit("mu"),
        isp=params.isp / scales.time,
        g0=params.g0 / scales.acceleration,
        u_max=params.u_max / scales.force,
        gamma=params.gamma / scales.unit("gamma"),
    )


def unscale_params(params: PhysicalParams, scales: ScaleSet) -> PhysicalParams:
    return PhysicalParams(
        mu=params.mu * scales.unit("mu"),
        isp=params.isp * scales.time,
        g0=params.g0 * scales.acceleration,
        u_max=params.u_max * scales.force,
        gamma=params.gamma * scales.unit("gamma"),
    )


def _split(x):
    x = np.asarray(x, dtype=float)
    n_x = x.shape[-1]
    if n_x not in (5, 7):
        raise ValueError(f"state dimension must be 5 or 7, got {n_x}")
    d = (n_x - 1) // 2
    return x[..., :d], x[..., d : 2 * d], x[..., 2 * d], d


def _check_domain(r, m, r_floor):
    rn = np.linalg.norm(r, axis=-1)
    if np.any(rn < r_floor):
        raise SingularRadiusError(f"|r| = {np.min(rn):.3e} is below the floor {r_floor:g}")
    if np.any(m <= 0):
        raise NonpositiveMassError(f"mass must be positive, got {np.min(m):.6g}")
    return rn


def gravity(r, mu):
    rn = np.linalg.norm(r, axis=-1, keepdims=True)
    return -mu * r / rn**3


def gravity_gradient(r, mu):
    """Jacobian of ``-mu r / |r|^3`` with respect to ``r``."""
    d = r.shape[-1]
    rn = np.linalg.norm(r, axis=-1)[..., None, None]
    rrT = r[..., :, None] * r[..., None, :]
    return -mu * (np.eye(d) / rn**3 - 3.0 * rrT / rn**5)


def drift(state, control, params: PhysicalParams, r_floor: float = RADIUS_FLOOR):
    """Drift ``[v; -mu r/|r|^3 + u/m; -|u|/(Isp g0)]``."""
    r, v, m, _ = _split(state)
    _check_domain(r, m, r_floor)
    u = np.asarray(control, dtype=float)
    acc = gravity(r, params.mu) + u / m[..., None]
    mdot = -np.linalg.norm(u, axis=-1) / params.exhaust_speed
    return np.concatenate([v, acc, mdot[..., None]], axis=-1)


def diffusion(state, params: PhysicalParams):
    """Diffusion matrix ``[0; (gamma/m) I; 0]`` of shape ``(..., n_x, n_w)``."""
    r, _, m, d = _split(state)
    if np.any(m <= 0):
        raise NonpositiveMassError(f"mass must be positive, got {np.min(m):.6g}")
    g = np.zeros(m.shape + (2 * d + 1, d))
    g[..., d : 2 * d, :] = (params.gamma / m)[..., None, None] * np.eye(d)
    return g


def jacobians(
    state,
    control,
    params: PhysicalParams,
    eps: float = NORM_SMOOTHING,
    mass_coupling: bool = True,
    r_floor: float = RADIUS_FLOOR,
):
    """Linearization ``f(x, u) ~ A x + B u + c`` about ``(state, control)``.

    The thrust norm is smoothed as ``sqrt(|u|^2 + eps^2)`` in the mass-rate
    row of ``B`` only, so ``c`` keeps the exact drift.  With
    ``mass_coupling=False`` the mass column of ``A`` and the mass row of ``B``
    are dropped, i.e. the mass is an exogenous known schedule.
    """
    r, _, m, d = _split(state)
    _check_domain(r, m, r_floor)
    u = np.asarray(control, dtype=float)
    n_x = 2 * d + 1
    batch = m.shape
    A = np.zeros(batch + (n_x, n_x))
    B = np.zeros(batch + (n_x, d))
    A[..., :d, d : 2 * d] = np.eye(d)
    A[..., d : 2 * d, :d] = gravity_gradient(r, params.mu)
    B[..., d : 2 * d, :] = (1.0 / m)[..., None, None] * np.eye(d)
    if mass_coupling:
        A[..., d : 2 * d, 2 * d] = -u / (m**2)[..., None]
        smooth = np.sqrt(np.sum(u * u, axis=-1) + eps**2)
        B[..., 2 * d, :] = -u / (smooth * params.exhaust_speed)[..., None]
    f = drift(state, u, params, r_floor)
    c = f - np.einsum("...ij,...j->...i", A, state) - np.einsum("...ij,...j->...i", B, u)
    return A, B, c


class SpacecraftModel:
    """Dynamics handle used by the discretizer and the simulator.

    Args:
        params: physical constants, in the same units as the states fed in.
        dim: spatial dimension, 2 or 3.
        mass_coupling: if False the linearization treats mass as a known
            time-varying coefficient (no mass sensitivity in A or B).
    """

    def __init__(self, params: PhysicalParams, dim: int, mass_coupling: bool = True,
                 eps: float = NORM_SMOOTHING, r_floor: float = RADIUS_FLOOR):
        if dim not in (2, 3):
            raise ValueError(f"dim must be 2 or 3, got {dim}")
        self.params = params
        self.dim = dim
        self.n_x = 2 * dim + 1
        self.n_u = dim
        self.n_w = dim
        self.mass_coupling = mass_coupling
        self.eps = eps
        self.r_floor = r_floor

    def with_mass_coupling(self, flag: bool) -> "SpacecraftModel":
        return SpacecraftModel(self.params, self.dim, flag, self.eps, self.r_floor)

    def drift(self, x, u):
        return drift(x, u, self.params, self.r_floor)

    def diffusion(self, x):
        return diffusion(x, self.params)

    def linearize(self, x, u):
        """Return ``(f, A, B)`` at the given point."""
        A, B, c = jacobians(x, u, self.params, self.eps, self.mass_coupling, self.r_floor)
        f = c + np.einsum("...ij,...j->...i", A, x) + np.einsum("...ij,...j->...i", B, u)
        return f, A, B


class ThrustMagnitudeModel:
    """Deterministic model with an explicit thrust-magnitude control.

    The control is ``[u, s]`` where ``s`` bounds ``|u|`` and drives the mass
    rate ``-s/(Isp g0)``.  Used by the reference-trajectory solver so that
    the mass equation is linear in the controls.
    """

    def __init__(self, params: PhysicalParams, dim: int, r_floor: float = RADIUS_FLOOR):
        self.params = params
        self.dim = dim
        self.n_x = 2 * dim + 1
        self.n_u = dim + 1
        self.n_w = dim
        self.r_floor = r_floor

    def drift(self, x, u):
        u = np.asarray(u, dtype=float)
        r, v, m, d = _split(x)
        _check_domain(r, m, self.r_floor)
        acc = gravity(r, self.params.mu) + u[..., :d] / m[..., None]
        mdot = -u[..., d] / self.params.exhaust_speed
        return np.concatenate([v, acc, mdot[..., None]], axis=-1)

    def diffusion(self, x):
        return np.zeros(np.shape(x) + (self.dim,))

    def linearize(self, x, u):
        u = np.asarray(u, dtype=float)
        r, _, m, d = _split(x)
        f = self.drift(x, u)
        batch = m.shape
        A = np.zeros(batch + (self.n_x, self.n_x))
        B = np.zeros(batch + (self.n_x, self.n_u))
        A[..., :d, d : 2 * d] = np.eye(d)
        A[..., d : 2 * d, :d] = gravity_gradient(r, self.params.mu)
        A[..., d : 2 * d, 2 * d] = -u[..., :d] / (m**2)[..., None]
        B[..., d : 2 * d, :d] = (1.0 / m)[..., None, None] * np.eye(d)
        B[..., 2 * d, d] = -1.0 / self.params.exhaust_speed
        return f, A, B


class LinearModel:
    """Time-invariant linear SDE ``dx = (A x + B u + c) dt + G dw`` (test surrogate)."""

    def __init__(self, A, B, c=None, G=None):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(self.A.shape[0], -1)
        self.n_x, self.n_u = self.B.shape
        self.c = np.zeros(self.n_x) if c is None else np.asarray(c, dtype=float)
        self.G = np.zeros((self.n_x, 1)) if G is None else np.asarray(G, dtype=float).reshape(self.n_x, -1)
        self.n_w = self.G.shape[1]

    def drift(self, x, u):
        return (np.einsum("ij,...j->...i", self.A, x) + np.einsum("ij,...j->...i", self.B, u)
                + self.c)

    def diffusion(self, x):
        return np.broadcast_to(self.G, np.shape(x)[:-1] + self.G.shape)

    def linearize(self, x, u):
        batch = np.shape(x)[:-1]
        return (self.drift(x, u), np.broadcast_to(self.A, batch + self.A.shape),
                np.broadcast_to(self.B, batch + self.B.shape))
