"""Closed-loop Monte Carlo of the nonlinear SDE under an affine policy.

Within segment ``k`` the control is held at ``u = F_k + K_k (x(t_k) - xbar_k)``
and the state follows ``dx = f(x, u) dt + G(x) dW``.  Each sample owns a
random stream spawned from ``(seed, sample index)``, so a sample's path does
not depend on how many other samples are drawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from covsteer.discretize import sqrt_factor
from covsteer.dynamics import ScaleSet, SpacecraftModel, scale_params
from covsteer.tables import tril_columns, tril_values, write_table

EULER = "euler"
RK4_DRIFT = "rk4-drift"


class SimulationError(ValueError):
    pass


@dataclass
class Ensemble:
    """Sampled closed-loop paths, in the units of the model that produced them.

    Attributes:
        seed: root seed.
        times: node times, shape ``(N+1,)``.
        states: node states, shape ``(n_samples, N+1, n_x)``.
        controls: applied (possibly clipped) controls, ``(n_samples, N, n_u)``.
        commanded: policy output before clipping, same shape.
        nominal: policy means ``xbar_k``, shape ``(N+1, n_x)``.
        flagged: samples that reached a nonpositive mass.
        clip_counts: clipped samples per segment.
        u_max: thrust bound used for clipping and reporting (``inf`` if none).
    """

    seed: int
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    commanded: np.ndarray
    nominal: np.ndarray
    flagged: np.ndarray
    clip_counts: np.ndarray
    u_max: float = np.inf

    @property
    def n_samples(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1] - 1

    @property
    def n_flagged(self) -> int:
        return int(np.count_nonzero(self.flagged))

    @property
    def valid(self) -> np.ndarray:
        return self.states[~self.flagged]

    @property
    def mean(self) -> np.ndarray:
        return ensemble_stats(self).mean

    @property
    def covariance(self) -> np.ndarray:
        return ensemble_stats(self).covariance

    def control_satisfaction(self) -> np.ndarray:
        """Fraction of samples whose commanded thrust norm is within ``u_max``, per segment."""
        norms = np.linalg.norm(self.commanded[~self.flagged], axis=-1)
        return np.mean(norms <= self.u_max, axis=0)


@dataclass
class EnsembleStats:
    mean: np.ndarray
    covariance: np.ndarray
    mass_mean: np.ndarray | None
    mass_std: np.ndarray | None


def ensemble_stats(ensemble: Ensemble, mass_index: int | None = -1) -> EnsembleStats:
    """Per-node sample mean and unbiased covariance over unflagged samples.

    Args:
        ensemble: simulated paths.
        mass_index: state index of the mass, or None for models without one.
    """
    X = ensemble.valid
    if X.shape[0] < 2:
        raise SimulationError(f"need at least 2 valid samples, got {X.shape[0]}")
    mean = X.mean(axis=0)
    dev = X - mean
    cov = np.einsum("snI,snJ->nIJ", dev, dev) / (X.shape[0] - 1)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if mass_index is None:
        return EnsembleStats(mean, cov, None, None)
    return EnsembleStats(mean, cov, mean[:, mass_index], np.sqrt(np.clip(cov[:, mass_index, mass_index], 0, None)))


def draw_standard_normals(seed: int, n_samples: int, n_x: int, N: int, substeps: int, n_w: int):
    """Per-sample draws: initial-state normals ``(n, n_x)`` and unit Wiener increments ``(n, N, substeps, n_w)``."""
    streams = np.random.SeedSequence(seed).spawn(n_samples)
    draws = np.empty((n_samples, n_x + N * substeps * n_w))
    for i, ss in enumerate(streams):
        draws[i] = np.random.default_rng(ss).standard_normal(draws.shape[1])
    return draws[:, :n_x], draws[:, n_x:].reshape(n_samples, N, substeps, n_w)


def simulate(model, times, nominal, feedforward, gains, x0_mean, P0, n_samples: int, seed: int,
             substeps: int = 20, u_max: float | None = None, clip: bool = True,
             mass_index: int | None = None, scheme: str = EULER) -> Ensemble:
    """Simulate ``n_samples`` closed-loop paths of ``model``.

    Args:
        model: object with vectorized ``drift(x, u)`` and ``diffusion(x)`` and attribute ``n_w``.
        times: node times ``(N+1,)``.
        nominal: policy means ``(N+1, n_x)``.
        feedforward: ``(N, n_u)``.
        gains: ``(N, n_u, n_x)``.
        x0_mean, P0: initial Gaussian.
        n_samples: number of paths.
        seed: root seed of the per-sample streams.
        substeps: integration steps per segment.
        u_max: thrust bound; None disables clipping.
        clip: saturate ``|u|`` at ``u_max`` before integrating.
        mass_index: state index checked for positivity, None to skip.
        scheme: ``"euler"`` (Euler-Maruyama) or ``"rk4-drift"``.
    """
    n_x = np.shape(nominal)[-1]
    N = np.size(times) - 1
    if n_samples < 1 or substeps < 1:
        raise SimulationError("n_samples and substeps must be positive")
    if np.shape(x0_mean) != (n_x,) or np.shape(P0) != (n_x, n_x):
        raise SimulationError("initial mean or covariance does not match the state dimension")
    z0, z = draw_standard_normals(seed, n_samples, n_x, N, substeps, model.n_w)
    x0 = np.asarray(x0_mean, dtype=float) + z0 @ sqrt_factor(np.asarray(P0, dtype=float)).T
    dt = np.diff(np.asarray(times, dtype=float)) / substeps
    dW = z * np.sqrt(dt)[None, :, None, None]
    ens = integrate_paths(model, times, nominal, feedforward, gains, x0, dW, u_max=u_max, clip=clip,
                          mass_index=mass_index, scheme=scheme)
    ens.seed = seed
    return ens


def integrate_paths(model, times, nominal, feedforward, gains, x0, dW, u_max: float | None = None,
                    clip: bool = True, mass_index: int | None = None, scheme: str = EULER) -> Ensemble:
    """Integrate closed-loop paths from given initial states and Wiener increments.

    Args:
        x0: initial states ``(n_samples, n_x)``.
        dW: Wiener increments ``(n_samples, N, substeps, n_w)``; the step count
            per segment is ``dW.shape[2]``.

    Within a step of length ``h`` the ``"euler"`` scheme adds ``f h + G dW``;
    ``"rk4-drift"`` replaces ``f h`` by a classical RK4 step of the drift with
    the control held, and keeps ``G`` at the start of the step.
    """
    if scheme not in (EULER, RK4_DRIFT):
        raise SimulationError(f"unknown scheme {scheme!r}")
    times = np.asarray(times, dtype=float)
    nominal = np.asarray(nominal, dtype=float)
    F = np.asarray(feedforward, dtype=float)
    K = np.asarray(gains, dtype=float)
    x = np.array(x0, dtype=float)
    dW = np.asarray(dW, dtype=float)
    N = times.size - 1
    n_samples, n_x = x.shape
    n_u = F.shape[-1]
    if nominal.shape != (N + 1, n_x) or F.shape != (N, n_u) or K.shape != (N, n_u, n_x):
        raise SimulationError(f"schedule shapes {nominal.shape}, {F.shape}, {K.shape} do not match "
                              f"N={N}, n_x={n_x}, n_u={n_u}")
    if dW.shape[:2] != (n_samples, N) or dW.shape[3] != model.n_w:
        raise SimulationError(f"Wiener increments of shape {dW.shape} do not match "
                              f"({n_samples}, {N}, substeps, {model.n_w})")
    substeps = dW.shape[2]
    bound = np.inf if u_max is None else float(u_max)
    states = np.empty((n_samples, N + 1, n_x))
    applied = np.zeros((n_samples, N, n_u))
    commanded = np.zeros((n_samples, N, n_u))
    clip_counts = np.zeros(N, dtype=int)
    flagged = np.zeros(n_samples, dtype=bool)
    if mass_index is not None:
        flagged |= x[:, mass_index] <= 0
    states[:, 0] = x

    for k in range(N):
        u = F[k] + (x - nominal[k]) @ K[k].T
        commanded[:, k] = u
        if clip and np.isfinite(bound):
            norm = np.linalg.norm(u, axis=-1)
            over = (norm > bound) & ~flagged
            clip_counts[k] = np.count_nonzero(over)
            u = np.where(over[:, None], u * (bound / np.where(over, norm, 1.0))[:, None], u)
        applied[:, k] = u
        h = (times[k + 1] - times[k]) / substeps
        for j in range(substeps):
            live = ~flagged
            xl, ul = x[live], u[live]
            noise = np.einsum("sij,sj->si", model.diffusion(xl), dW[live, k, j])
            step = model.drift(xl, ul) * h if scheme == EULER else _rk4_step(model, xl, ul, h)
            x = x.copy()
            x[live] = xl + step + noise
            if mass_index is not None:
                flagged |= live & (x[:, mass_index] <= 0)
        states[:, k + 1] = x
    return Ensemble(seed=-1, times=times, states=states, controls=applied, commanded=commanded,
                    nominal=nominal, flagged=flagged, clip_counts=clip_counts, u_max=bound)


def _rk4_step(model, x, u, dt):
    k1 = model.drift(x, u)
    k2 = model.drift(x + 0.5 * dt * k1, u)
    k3 = model.drift(x + 0.5 * dt * k2, u)
    k4 = model.drift(x + dt * k3, u)
    return dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0


@dataclass
class Policy:
    """Affine feedback schedule in km, km/s, kg and kg*km/s^2.

    Attributes:
        times: node times ``(N+1,)`` in seconds.
        means: node means ``(N+1, n_x)``.
        feedforward: ``(N, n_u)``.
        gains: ``(N, n_u, n_x)``.
    """

    times: np.ndarray
    means: np.ndarray
    feedforward: np.ndarray
    gains: np.ndarray

    @classmethod
    def from_solution(cls, solution) -> "Policy":
        if solution.gains is None:
            raise SimulationError("the solution carries no feedback gains")
        return cls(solution.times(), solution.means(), solution.feedforward(), solution.gains_physical())

    @property
    def N(self) -> int:
        return self.feedforward.shape[0]


def simulate_closed_loop(solution, scenario, n_samples: int = 1000, seed: int = 0, substeps: int = 20,
                         clip: bool = True, scheme: str = RK4_DRIFT) -> Ensemble:
    """Monte Carlo of a steering policy on the full mass-coupled SDE.

    Integration runs in canonical units; the returned ensemble is in km,
    km/s, kg and kg*km/s^2.

    Args:
        solution: a :class:`Policy` or the output of :func:`covsteer.steering.scp_solve`.
        scenario: supplies the initial Gaussian and physical constants.
        n_samples: number of paths.
        seed: root seed of the per-sample streams.
        substeps: integration steps per segment.
        clip: saturate the thrust at ``u_max``.
        scheme: see :func:`integrate_paths`.
    """
    policy = solution if isinstance(solution, Policy) else Policy.from_solution(solution)
    n_x = 2 * scenario.dim + 1
    N = policy.N
    if (policy.times.shape != (N + 1,) or policy.means.shape != (N + 1, n_x)
            or policy.gains.shape != (N, scenario.dim, n_x)):
        raise SimulationError("feedforward and gain schedules must cover every segment of the scenario state")
    scales = ScaleSet.canonical(scenario.params.mu, scenario.x_i[-1])
    model = SpacecraftModel(scale_params(scenario.params, scales), scenario.dim, mass_coupling=True)
    su = scales.state_units(n_x)
    f = scales.force
    x0 = np.asarray(scenario.x_i, dtype=float) / su
    P0 = np.asarray(scenario.P_i, dtype=float) / np.multiply.outer(su, su)
    ens = simulate(model, policy.times / scales.time, policy.means / su, policy.feedforward / f,
                   policy.gains * su[None, None, :] / f, x0, P0, n_samples, seed, substeps=substeps,
                   u_max=model.params.u_max, clip=clip, mass_index=n_x - 1, scheme=scheme)
    return Ensemble(seed=seed, times=np.asarray(policy.times, dtype=float), states=ens.states * su,
                    controls=ens.controls * f, commanded=ens.commanded * f, nominal=ens.nominal * su,
                    flagged=ens.flagged, clip_counts=ens.clip_counts, u_max=ens.u_max * f)


def coverage_check(ensemble: Ensemble, covariances, confidence: float = 0.95, blocks=None, means=None) -> dict:
    """Fraction of valid samples inside the predicted confidence ellipsoid, per node and block.

    Args:
        ensemble: simulated paths.
        covariances: predicted node covariances ``(N+1, n_x, n_x)``.
        confidence: ellipsoid probability level.
        blocks: mapping of block name to state indices; defaults to the
            position and velocity blocks of a ``[r, v, m]`` state.
        means: predicted node means; defaults to ``ensemble.nominal``.

    Raises:
        SimulationError: if a block covariance is singular.
    """
    X = ensemble.valid
    n_x = X.shape[-1]
    if blocks is None:
        d = (n_x - 1) // 2
        blocks = {"position": np.arange(d), "velocity": np.arange(d, 2 * d)}
    means = ensemble.nominal if means is None else np.asarray(means, dtype=float)
    covariances = np.asarray(covariances, dtype=float)
    out = {}
    for name, idx in blocks.items():
        idx = np.asarray(idx)
        q = stats.chi2.ppf(confidence, idx.size)
        fractions = np.empty(X.shape[1])
        for n in range(X.shape[1]):
            S = covariances[n][np.ix_(idx, idx)]
            lam = np.linalg.eigvalsh(S)
            if not lam[0] > 1e-12 * max(lam[-1], 1e-300):
                raise SimulationError(f"{name} covariance at node {n} is singular")
            dev = X[:, n, idx] - means[n, idx]
            m2 = np.einsum("si,si->s", dev, np.linalg.solve(S, dev.T).T)
            fractions[n] = np.mean(m2 <= q)
        out[name] = fractions
    return out


def state_names(n_x: int):
    d = (n_x - 1) // 2
    axes = "xyz"[:d]
    return [f"r{a}" for a in axes] + [f"v{a}" for a in axes] + ["m"]


def state_units(n_x: int):
    d = (n_x - 1) // 2
    return ["km"] * d + ["km/s"] * d + ["kg"]


def write_ensemble_summary(path, ensemble: Ensemble, coverage: dict | None = None):
    """Per-node table: time, sample mean, covariance lower triangle, coverage, clip count."""
    st = ensemble_stats(ensemble)
    n_x = st.mean.shape[-1]
    names, units = state_names(n_x), state_units(n_x)
    cov_cols = tril_columns("cov", names)
    cov_units = [f"{units[i]}*{units[j]}" for i in range(n_x) for j in range(i + 1)]
    columns = ["t"] + [f"mean_{n}" for n in names] + cov_cols
    col_units = ["s"] + units + cov_units
    parts = [ensemble.times[:, None], st.mean, tril_values(st.covariance)]
    for name, frac in (coverage or {}).items():
        columns.append(f"inside_{name}")
        col_units.append("1")
        parts.append(frac[:, None])
    clips = np.append(ensemble.clip_counts.astype(float), np.nan)
    sat = np.append(ensemble.control_satisfaction(), np.nan)
    columns += ["clipped", "thrust_ok_fraction"]
    col_units += ["count", "1"]
    parts += [clips[:, None], sat[:, None]]
    title = (f"ensemble seed={ensemble.seed} samples={ensemble.n_samples} "
             f"flagged={ensemble.n_flagged} u_max={float(ensemble.u_max)!r}")
    write_table(path, columns, col_units, np.hstack(parts), title=title)


def write_samples(path, ensemble: Ensemble):
    """Raw node states, one row per (sample, node)."""
    n, Np1, n_x = ensemble.states.shape
    idx = np.indices((n, Np1)).reshape(2, -1).T.astype(float)
    rows = np.hstack([idx, ensemble.states.reshape(-1, n_x)])
    write_table(path, ["sample", "node"] + state_names(n_x), ["1", "1"] + state_units(n_x), rows,
                title=f"samples seed={ensemble.seed}")
