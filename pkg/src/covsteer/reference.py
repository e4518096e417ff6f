"""Deterministic minimum-fuel reference trajectory.

The nominal is computed by successive convexification: the dynamics with an
explicit thrust-magnitude control ``[u, s]`` (``|u| <= s <= u_max``, mass
rate ``-s/c``) are linearized about the current guess, a second-order cone
program with virtual controls and a box trust region is solved, and the step
is accepted or rejected from the ratio of actual to predicted decrease of the
penalized cost.

Reference files are plain text::

    # covsteer reference
    # n_x 5
    # n_u 2
    # N 40
    # units s km km/s kg N
    # columns t r_1 r_2 v_1 v_2 m u_1 u_2
    <N+1 rows; the control fields of the last row are nan>
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from covsteer import conic
from covsteer.conic import ConicProgram, SolverSettings
from covsteer.discretize import (ReferenceTrajectory, discretize, flow_segments,
                                 propagate_nonlinear)
from covsteer.dynamics import NEWTON, ScaleSet, SpacecraftModel, ThrustMagnitudeModel, scale_params
from covsteer.tables import atomic_write

log = logging.getLogger(__name__)


class ReferenceSolveError(RuntimeError):
    pass


class InfeasibleReferenceError(ReferenceSolveError):
    pass


class ReferenceConvergenceError(ReferenceSolveError):
    pass


class ReferenceFormatError(ValueError):
    pass


@dataclass
class InitOptions:
    """Settings of the successive-convexification reference solver.

    Args:
        max_iterations: accepted plus rejected steps.
        virtual_weight: L1 penalty on the dynamics defects.
        trust_radius: initial box radius on the state step (scaled units).
        tol: stop when the predicted decrease falls below this value.
        defect_tol: largest accepted dynamics defect at convergence.
        substeps: RK4 steps per segment.
        polar_guess: interpolate the cold start in polar coordinates.
    """

    max_iterations: int = 200
    virtual_weight: float = 100.0
    trust_radius: float = 0.5
    min_trust_radius: float = 1e-10
    max_trust_radius: float = 4.0
    tol: float = 1e-10
    defect_tol: float = 1e-10
    substeps: int = 32
    polar_guess: bool = True
    final_mass_fraction: float = 0.8
    solver: SolverSettings | None = None


def _polar_guess(x0, xf, times, dim):
    """Radius, prograde angle and out-of-plane coordinate linear in time."""
    t = (times - times[0]) / (times[-1] - times[0])
    T = times[-1] - times[0]
    r0, rf = np.hypot(x0[0], x0[1]), np.hypot(xf[0], xf[1])
    th0, thf = math.atan2(x0[1], x0[0]), math.atan2(xf[1], xf[0])
    prograde = x0[0] * x0[dim + 1] - x0[1] * x0[dim] >= 0
    dth = (thf - th0) % (2 * np.pi)
    if not prograde:
        dth -= 2 * np.pi
    rad = r0 + (rf - r0) * t
    th = th0 + dth * t
    rdot, thdot = (rf - r0) / T, dth / T
    c, s = np.cos(th), np.sin(th)
    out = np.zeros((times.size, 2 * dim))
    out[:, 0], out[:, 1] = rad * c, rad * s
    out[:, dim] = rdot * c - rad * thdot * s
    out[:, dim + 1] = rdot * s + rad * thdot * c
    if dim == 3:
        out[:, 2] = x0[2] + (xf[2] - x0[2]) * t
        out[:, 5] = (xf[2] - x0[2]) / T
    return out


def initial_guess(x0, xf, times, dim, final_mass_fraction=0.8, polar=True):
    """Cold-start nodes: interpolated position/velocity, mass linear to a fraction of ``m_0``."""
    x0 = np.asarray(x0, dtype=float)
    xf = np.asarray(xf, dtype=float)
    t = (times - times[0]) / (times[-1] - times[0])
    n_rv = 2 * dim
    if polar:
        rv = _polar_guess(x0, xf, times, dim)
    else:
        rv = x0[:n_rv] + np.outer(t, xf[:n_rv] - x0[:n_rv])
    rv[0], rv[-1] = x0[:n_rv], xf[:n_rv]
    m = x0[-1] * (1.0 - (1.0 - final_mass_fraction) * t)
    return np.column_stack([rv, m])


def _penalized_cost(model, X, W, h, lam, substeps):
    ends = flow_segments(model, X[:-1], W, h, substeps)
    defects = ends - X[1:]
    return float(np.sum(W[:, -1] * h) + lam * np.sum(np.abs(defects))), defects


def solve_reference_nd(model: ThrustMagnitudeModel, times, x0, xf, final_mask=None,
                       options: InitOptions | None = None, guess=None):
    """SCvx on scaled data; returns ``(states, controls_with_magnitude, info)``."""
    opts = options or InitOptions()
    times = np.asarray(times, dtype=float)
    h = np.diff(times)
    N = h.size
    n, m1 = model.n_x, model.n_u
    d = model.dim
    mask = np.ones(n, dtype=bool) if final_mask is None else np.asarray(final_mask, dtype=bool)
    X = initial_guess(x0, xf, times, d, opts.final_mass_fraction, opts.polar_guess) if guess is None \
        else np.array(guess, dtype=float)
    # the merit function only sees dynamics defects, so the guess must honor the boundary
    X[0] = x0
    X[-1, mask] = np.asarray(xf, dtype=float)[mask]
    W = np.zeros((N, m1))
    u_max = model.params.u_max
    lam = opts.virtual_weight
    radius = opts.trust_radius
    J, _ = _penalized_cost(model, X, W, h, lam, opts.substeps)
    settings = opts.solver or SolverSettings()
    info = {"iterations": 0, "accepted": 0}
    for it in range(1, opts.max_iterations + 1):
        info["iterations"] = it
        disc = discretize(model, X[:-1], W, h, opts.substeps)
        prog = ConicProgram()
        Xv = prog.add_variables((N + 1, n))
        Wv = prog.add_variables((N, m1))
        Vv = prog.add_variables((N, n))
        Av = prog.add_variables((N, n))
        I = np.eye(n)
        prog.add_equality([(Xv[0], I)], x0)
        prog.add_equality([(Xv[N][mask], np.eye(int(mask.sum())))], np.asarray(xf)[mask])
        for k in range(N):
            prog.add_equality([(Xv[k + 1], I), (Xv[k], -disc.A[k]), (Wv[k], -disc.B[k]), (Vv[k], -I)],
                              disc.c[k])
            prog.add_soc([(Wv[k, d], 1.0), (Wv[k, :d], np.eye(d), 1)])
        prog.add_nonneg([(Wv[:, d], -1.0)], np.full(N, u_max))
        prog.add_nonneg([(Av.ravel(), 1.0), (Vv.ravel(), -1.0)])
        prog.add_nonneg([(Av.ravel(), 1.0), (Vv.ravel(), 1.0)])
        inner = Xv[1:].ravel()
        prog.add_nonneg([(inner, -1.0)], radius + X[1:].ravel())
        prog.add_nonneg([(inner, 1.0)], radius - X[1:].ravel())
        prog.add_nonneg([(Xv[1:, -1], 1.0)], np.full(N, -0.05 * x0[-1]))
        prog.add_cost(Wv[:, d], h)
        prog.add_cost(Av.ravel(), lam)
        sol = conic.solve(prog, settings)
        if not sol.ok:
            if radius > opts.min_trust_radius:
                radius *= 0.5
                continue
            raise ReferenceConvergenceError(f"reference subproblem failed with status {sol.status}")
        Xn, Wn = sol.primal[Xv], sol.primal[Wv]
        L = sol.objective
        predicted = J - L
        Jn, defects = _penalized_cost(model, Xn, Wn, h, lam, opts.substeps)
        actual = J - Jn
        step = float(np.max(np.abs(Xn - X)))
        log.debug("ref %d J=%.10e pred=%.3e act=%.3e radius=%.3e", it, J, predicted, actual, radius)
        if predicted <= opts.tol * max(1.0, abs(J)):
            break
        rho = actual / predicted
        if rho < 0.1:
            radius = max(0.5 * radius, opts.min_trust_radius)
            if radius <= opts.min_trust_radius:
                break
            continue
        X, W, J = Xn, Wn, Jn
        info["accepted"] += 1
        if rho < 0.25:
            radius *= 0.5
        elif rho > 0.7:
            radius = min(2.0 * radius, opts.max_trust_radius)
        if step < 1e-12:
            break
    else:
        raise ReferenceConvergenceError(f"no convergence in {opts.max_iterations} iterations")
    _, defects = _penalized_cost(model, X, W, h, lam, opts.substeps)
    info["max_defect"] = float(np.max(np.abs(defects)))
    if info["max_defect"] > 1e-6:
        raise InfeasibleReferenceError(
            f"boundary pair not reachable within u_max (max defect {info['max_defect']:.3e})")
    return X, W, info


def solve_reference(scenario, N: int | None = None, options: InitOptions | None = None) -> ReferenceTrajectory:
    """Minimum-fuel deterministic nominal on the scenario grid (physical units).

    The returned nodes are re-propagated from ``x_i`` under the optimized
    zero-order-hold thrust, so they satisfy the nonlinear dynamics by
    construction.
    """
    opts = options or InitOptions()
    N = N or scenario.N
    scales = ScaleSet.canonical(scenario.params.mu, scenario.x_i[-1])
    params = scale_params(scenario.params, scales)
    dim = scenario.dim
    model = ThrustMagnitudeModel(params, dim)
    su = scales.state_units(model.n_x)
    times = np.linspace(0.0, scenario.t_f / scales.time, N + 1)
    x0 = np.asarray(scenario.x_i, dtype=float) / su
    xf = np.nan_to_num(np.asarray(scenario.x_f, dtype=float) / su)
    mask = np.arange(model.n_x) < 2 * dim
    X, W, info = solve_reference_nd(model, times, x0, xf, mask, opts)
    u = W[:, :dim]
    flight = SpacecraftModel(params, dim)
    nodes = propagate_nonlinear(flight, x0, u, np.diff(times), opts.substeps)
    miss = float(np.max(np.abs(nodes[-1, : 2 * dim] - xf[: 2 * dim])))
    if miss > 1e-6:
        raise ReferenceConvergenceError(f"re-propagated terminal error {miss:.3e} exceeds 1e-6")
    log.info("reference: %d iterations, final mass %.6f kg", info["iterations"], nodes[-1, -1] * scales.mass)
    return ReferenceTrajectory(times * scales.time, nodes * su, u * scales.force)


def write_reference(path, ref: ReferenceTrajectory):
    n_x, n_u = ref.states.shape[1], ref.controls.shape[1]
    d = n_u
    cols = (["t"] + [f"r_{i + 1}" for i in range(d)] + [f"v_{i + 1}" for i in range(d)] + ["m"]
            + [f"u_{i + 1}" for i in range(n_u)])
    units = ["s"] + ["km"] * d + ["km/s"] * d + ["kg"] + ["N"] * n_u
    lines = ["# covsteer reference", f"# n_x {n_x}", f"# n_u {n_u}", f"# N {ref.N}",
             "# units " + " ".join(units), "# columns " + " ".join(cols)]
    controls = np.vstack([ref.controls / NEWTON, np.full((1, n_u), np.nan)])
    for t, x, u in zip(ref.times, ref.states, controls):
        lines.append(" ".join(repr(float(v)) for v in (t, *x, *u)))
    atomic_write(path, "\n".join(lines) + "\n")


def load_reference(path) -> ReferenceTrajectory:
    header, rows = {}, []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) >= 2 and parts[0] in ("n_x", "n_u", "N"):
                    try:
                        header[parts[0]] = int(parts[1])
                    except ValueError:
                        raise ReferenceFormatError(f"line {lineno}: field {parts[0]} is not an integer") from None
                elif parts and parts[0] == "units":
                    header["units"] = parts[1:]
                continue
            try:
                rows.append([float(v) for v in line.split()])
            except ValueError as exc:
                raise ReferenceFormatError(f"line {lineno}: {exc}") from None
            width = header.get("n_x", 0) + header.get("n_u", 0) + 1
            if len(rows[-1]) != width:
                raise ReferenceFormatError(f"line {lineno}: expected {width} fields, found {len(rows[-1])}")
    for key in ("n_x", "n_u", "N"):
        if key not in header:
            raise ReferenceFormatError(f"missing header field {key}")
    n_x, n_u, N = header["n_x"], header["n_u"], header["N"]
    expected_units = ["s"] + ["km"] * n_u + ["km/s"] * n_u + ["kg"] + ["N"] * n_u
    if header.get("units") != expected_units:
        raise ReferenceFormatError(f"units header {header.get('units')} does not match {expected_units}")
    data = np.array(rows)
    if data.shape[0] != N + 1:
        raise ReferenceFormatError(f"expected {N + 1} node rows, found {data.shape[0]}")
    try:
        ref = ReferenceTrajectory(data[:, 0], data[:, 1 : 1 + n_x], data[:-1, 1 + n_x :] * NEWTON)
        ref.validate_mass()
    except ValueError as exc:
        raise ReferenceFormatError(str(exc)) from None
    return ref
