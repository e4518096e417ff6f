"""Result tables, confidence-ellipse polylines and comparison metrics.

A solved run directory holds (all tables in km, km/s, kg, s and kg*km/s^2):

    nodes.tsv        t, mean state, covariance lower triangle
    controls.tsv     t_k, feedforward components, |F| in N
    gains.tsv        t_k, gain entries K_ij
    iterations.log   one tab-separated line per SCP iteration
    scenario.yaml    the scenario that was solved
    manifest.json    settings, outcome and certification metrics
"""

from __future__ import annotations

import numpy as np
from scipy import stats

from covsteer.dynamics import NEWTON
from covsteer.montecarlo import Policy, state_names, state_units
from covsteer.tables import TableFormatError, from_tril, read_table, tril_columns, tril_values, write_table

FORCE_UNIT = "kg*km/s^2"


class EllipseError(ValueError):
    pass


def emit_ellipses(covariances, means, confidence: float = 0.95, scale: float = 1.0, n_points: int = 64):
    """Level sets ``(x - m)^T S^-1 (x - m) = chi2_2(confidence)`` of 2x2 blocks.

    Args:
        covariances: ``(..., 2, 2)`` block covariances.
        means: ``(..., 2)`` centers.
        confidence: probability mass inside the ellipse.
        scale: display magnification of the offsets from the center.
        n_points: vertices per polyline.

    Returns:
        Array ``(..., n_points, 2)``; the first vertex lies on the major axis.
    """
    S = np.asarray(covariances, dtype=float)
    m = np.asarray(means, dtype=float)
    if S.shape[-2:] != (2, 2) or m.shape[-1] != 2 or S.shape[:-2] != m.shape[:-1]:
        raise EllipseError(f"covariances {S.shape} and means {m.shape} are not matching 2x2 blocks")
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    lam, V = np.linalg.eigh(S)
    if np.any(lam[..., 0] <= 1e-12 * np.maximum(lam[..., 1], 1e-300)):
        raise EllipseError("singular covariance block")
    radius = np.sqrt(stats.chi2.ppf(confidence, 2))
    theta = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    circle = np.stack([np.sin(theta), np.cos(theta)], axis=-1)
    axes = V * np.sqrt(lam)[..., None, :]
    offsets = np.einsum("...ij,pj->...pi", axes, circle)
    return m[..., None, :] + scale * radius * offsets


def write_ellipses(path, polylines, names=("x", "y"), unit="km", nodes=None):
    """Table of ``node, vertex, x, y`` rows; ``nodes`` labels the polylines (default 0, 1, ...)."""
    P = np.asarray(polylines)
    count, pts = P.shape[0], P.shape[1]
    labels = np.arange(count) if nodes is None else np.asarray(nodes)
    idx = np.column_stack([np.repeat(labels, pts), np.tile(np.arange(pts), count)]).astype(float)
    write_table(path, ["node", "vertex", *names], ["1", "1", unit, unit],
                np.hstack([idx, P.reshape(-1, 2)]), title="confidence ellipses")


def _gain_columns(n_u, n_x):
    names, units = state_names(n_x), state_units(n_x)
    axes = "xyz"[:n_u]
    cols = [f"K_{axes[i]}_{names[j]}" for i in range(n_u) for j in range(n_x)]
    col_units = [f"{FORCE_UNIT}/{units[j]}" for _ in range(n_u) for j in range(n_x)]
    return cols, col_units


def write_solution_tables(directory, solution):
    """Write ``nodes.tsv``, ``controls.tsv`` and ``gains.tsv`` for a solved policy."""
    t = solution.times()
    X = solution.means()
    P = solution.covariances()
    n_x = X.shape[1]
    names, units = state_names(n_x), state_units(n_x)
    cov_units = [f"{units[i]}*{units[j]}" for i in range(n_x) for j in range(i + 1)]
    write_table(f"{directory}/nodes.tsv", ["t"] + [f"mean_{n}" for n in names] + tril_columns("cov", names),
                ["s"] + units + cov_units, np.hstack([t[:, None], X, tril_values(P)]), title="node means and covariances")
    F = solution.feedforward()
    n_u = F.shape[1]
    axes = "xyz"[:n_u]
    write_table(f"{directory}/controls.tsv", ["t"] + [f"F_{a}" for a in axes] + ["thrust"],
                ["s"] + [FORCE_UNIT] * n_u + ["N"],
                np.hstack([t[:-1, None], F, np.linalg.norm(F, axis=1)[:, None] / NEWTON]), title="feedforward thrust")
    if solution.gains is not None:
        K = solution.gains_physical()
        cols, col_units = _gain_columns(n_u, n_x)
        write_table(f"{directory}/gains.tsv", ["t"] + cols, ["s"] + col_units,
                    np.hstack([t[:-1, None], K.reshape(K.shape[0], -1)]), title="feedback gains")


def read_policy(directory) -> Policy:
    """Rebuild a :class:`Policy` from the tables of :func:`write_solution_tables`."""
    cols, _, nodes = read_table(f"{directory}/nodes.tsv")
    n_x = sum(c.startswith("mean_") for c in cols)
    _, _, ctrl = read_table(f"{directory}/controls.tsv")
    _, _, gains = read_table(f"{directory}/gains.tsv")
    n_u = ctrl.shape[1] - 2
    N = ctrl.shape[0]
    if nodes.shape[0] != N + 1 or gains.shape != (N, 1 + n_u * n_x):
        raise TableFormatError(f"{directory}: node, control and gain tables disagree in size")
    return Policy(times=nodes[:, 0], means=nodes[:, 1:1 + n_x], feedforward=ctrl[:, 1:1 + n_u],
                  gains=gains[:, 1:].reshape(N, n_u, n_x))


def read_covariances(directory):
    cols, _, nodes = read_table(f"{directory}/nodes.tsv")
    n_x = sum(c.startswith("mean_") for c in cols)
    return from_tril(nodes[:, 1 + n_x:], n_x)


def solution_metrics(solution) -> dict:
    """Scalar summary used in manifests and mass-coupling comparisons."""
    P = solution.covariances()
    d = solution.problem.model.dim
    trace = np.trace(P[:, :d, :d], axis1=1, axis2=2)
    X = solution.means()
    thrust = np.linalg.norm(solution.feedforward(), axis=1) / NEWTON
    return {
        "final_mass_kg": float(X[-1, -1]),
        "final_mass_std_kg": float(np.sqrt(max(P[-1, -1, -1], 0.0))),
        "peak_mass_std_kg": float(np.sqrt(max(P[:, -1, -1].max(), 0.0))),
        "peak_position_trace_km2": float(trace.max()),
        "peak_position_trace_node": int(trace.argmax()),
        "peak_thrust_N": float(thrust.max()),
        "iterations": solution.iterations,
        "converged": bool(solution.converged),
        "accurate": bool(solution.accurate),
        "J3": float(solution.J3),
    }


COMPARE_COLUMNS = ["mass_stochastic", "final_mass", "final_mass_std", "peak_position_trace",
                   "peak_thrust", "iterations"]
COMPARE_UNITS = ["1", "kg", "kg", "km^2", "N", "count"]


def comparison_rows(on: dict, off: dict):
    """Rows for the stochastic leg, the deterministic leg and their ratio."""
    keys = ["final_mass_kg", "final_mass_std_kg", "peak_position_trace_km2", "peak_thrust_N", "iterations"]
    row_on = [1.0] + [float(on[k]) for k in keys]
    row_off = [0.0] + [float(off[k]) for k in keys]
    ratio = [np.nan] + [a / b if b else np.nan for a, b in zip(row_on[1:], row_off[1:])]
    return np.array([row_on, row_off, ratio])
