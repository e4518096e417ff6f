"""Chance-constrained covariance steering by sequential convex programming.

Each iteration re-discretizes the dynamics about the current mean and
feedforward, then solves a semidefinite program in the variables

    x_k    mean state (nondimensional)
    F_k    feedforward thrust
    P_k    state covariance
    U_k    K_k P_k
    Y_k    K_k P_k K_k^T
    tau_k  bound on the control standard deviation
    zeta_k linearization slack

The covariance-side variables are scaled uniformly by ``d``:
``P~ = d^2 P``, ``U~ = d^2 U``, ``Y~ = d^2 Y``, ``F~ = d F`` and
``tau~ = d tau`` (see :func:`covariance_scaling`).  The control chance
constraint then reads ``|F~| + sqrt(chi2_q(beta_u)) tau~ <= d u_max``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from covsteer import conic
from covsteer.conic import ConicProgram, SolverSettings, congruence_map, pack, svec_dim, unpack
from covsteer.discretize import Discretization, ReferenceTrajectory, discretize, propagate_covariance
from covsteer.dynamics import ScaleSet, SpacecraftModel, scale_params

log = logging.getLogger(__name__)

UPPER_BOUND = "upper-bound"
EQUALITY = "equality"


class SteeringError(RuntimeError):
    pass


class SubproblemError(SteeringError):
    def __init__(self, iteration, status, history=None):
        super().__init__(f"subproblem at iteration {iteration} returned status {status!r}")
        self.iteration = iteration
        self.status = status
        self.history = history or []


class ConvergenceError(SteeringError):
    def __init__(self, solution):
        super().__init__(f"no convergence after {solution.iterations} iterations")
        self.solution = solution


class SingularCovarianceError(SteeringError):
    pass


def penalty_weight(iteration: int) -> float:
    """Slack penalty ``min(10^(i+3), 10^12)`` for SCP iteration ``i >= 1``."""
    if iteration < 1:
        raise ValueError("iterations are counted from 1")
    return float(min(10.0 ** min(iteration + 3, 12), 1e12))


def chi2_quantile_sqrt(dof: int, level: float) -> float:
    """Square root of the ``level`` quantile of a chi-squared law with ``dof`` dof."""
    if dof < 1 or int(dof) != dof:
        raise ValueError(f"dof must be a positive integer, got {dof}")
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    return float(np.sqrt(stats.chi2.ppf(level, dof)))


@dataclass
class SolverConfig:
    """Settings of the covariance-steering SCP.

    Attributes:
        beta_u: probability that the applied thrust stays within ``u_max``.
        p: confidence level of the terminal covariance bound.
        eps_Y: weight of ``trace(Y)`` in the cost.
        eps_x: convergence tolerance on the largest node mean shift.
        eps_zeta: convergence tolerance on the linearization slack.
        d: uniform scale of the program variables, see :func:`covariance_scaling`.
        terminal_covariance_mode: ``"upper-bound"`` or ``"equality"`` on ``P_N``.
        tau_init_fraction: first ``tau`` reference as a fraction of the thrust bound.
        accept_inaccurate: continue from subproblems that only reached the loose tolerance.
        initial_resolution: components whose initial variance is below this
            fraction of the largest one get no initial feedback.
    """

    beta_u: float = 0.95
    p: float = 0.95
    eps_Y: float = 0.01
    eps_x: float = 5e-4
    eps_zeta: float = 1e-6
    d: float = 100.0
    max_iterations: int = 30
    terminal_covariance_mode: str = UPPER_BOUND
    tau_init_fraction: float = 0.05
    accept_inaccurate: bool = True
    initial_resolution: float = 1e-8
    substeps: int = 32
    w_schedule: Callable[[int], float] = penalty_weight
    solver: SolverSettings = field(default_factory=SolverSettings)

    def __post_init__(self):
        if not 0 < self.beta_u < 1:
            raise ValueError("beta_u must lie in (0, 1)")
        if not 0 < self.p < 1:
            raise ValueError("p must lie in (0, 1)")
        if not self.eps_Y > 0:
            raise ValueError("eps_Y must be positive")
        if not self.d > 0:
            raise ValueError("d must be positive")
        if self.terminal_covariance_mode not in (UPPER_BOUND, EQUALITY):
            raise ValueError(f"unknown terminal covariance mode {self.terminal_covariance_mode!r}")


@dataclass
class CovarianceScaling:
    """Program units: ``P = S P~ S``, ``U = c U~ S``, ``Y = c^2 Y~``, ``F = c F~``.

    ``bound`` is the thrust limit expressed in ``F~`` units.
    """

    state: np.ndarray
    control: float
    bound: float

    def to_program(self, P):
        return P / np.multiply.outer(self.state, self.state)

    def from_program(self, P):
        return P * np.multiply.outer(self.state, self.state)


def covariance_scaling(n: int, u_max: float, d: float) -> CovarianceScaling:
    """Uniform scaling by ``d``: ``P~ = d^2 P``, ``U~ = d^2 U``, ``Y~ = d^2 Y`` and ``F~ = d F``."""
    return CovarianceScaling(np.full(n, 1.0 / d), 1.0 / d, float(u_max) * d)


@dataclass
class Boundary:
    """Boundary means and covariances in nondimensional units."""

    x0: np.ndarray
    xf: np.ndarray
    final_mask: np.ndarray
    P0: np.ndarray
    Pf: np.ndarray


@dataclass
class SteeringIterate:
    """Decision values of one solved subproblem, in program scaling."""

    x: np.ndarray
    F: np.ndarray
    P: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    tau: np.ndarray
    zeta: np.ndarray
    tau_ref: np.ndarray


@dataclass
class SubproblemLayout:
    x: np.ndarray
    F: np.ndarray
    P: np.ndarray
    U: np.ndarray
    Y: np.ndarray
    tau: np.ndarray
    eta: np.ndarray
    fnorm: np.ndarray
    quad: np.ndarray
    sqrt_w: float


def _schur_maps(n: int, m: int):
    """Selection matrices placing packed P, row-major U and packed Y in the packed Schur block."""
    side = n + m
    rows, cols = conic.tril_indices(side)
    sz = rows.size
    MP = np.zeros((sz, svec_dim(n)))
    MU = np.zeros((sz, m * n))
    MY = np.zeros((sz, svec_dim(m)))
    p_lookup = {(i, j): t for t, (i, j) in enumerate(zip(*conic.tril_indices(n)))}
    y_lookup = {(i, j): t for t, (i, j) in enumerate(zip(*conic.tril_indices(m)))}
    for t, (i, j) in enumerate(zip(rows, cols)):
        if i < n:
            MP[t, p_lookup[(i, j)]] = 1.0
        elif j < n:
            MU[t, (i - n) * n + j] = conic.SQRT2
        else:
            MY[t, y_lookup[(i - n, j - n)]] = 1.0
    return MP, MU, MY


def _cross_map(A, B):
    """Matrix ``L`` with ``pack(A U^T B^T + B U A^T) = L vec(U)`` (row-major ``U``)."""
    n = A.shape[0]
    m = B.shape[1]
    # M[a, b] = B[:, a] A[:, b]^T
    M = B.T[:, None, :, None] * A.T[None, :, None, :]
    return pack(M + np.swapaxes(M, -1, -2)).reshape(m * n, -1).T


def scale_segments(disc: Discretization, scaling: CovarianceScaling):
    """Covariance-recursion matrices in program units."""
    s = scaling.state
    A = disc.A * (s[None, None, :] / s[None, :, None])
    B = disc.B * (scaling.control / s)[None, :, None]
    Q = disc.Q / np.multiply.outer(s, s)[None]
    return A, B, Q


def build_subproblem(disc: Discretization, boundary: Boundary, tau_ref, config: SolverConfig,
                     scaling: CovarianceScaling, w: float):
    """Assemble the convex covariance-steering SDP about the current reference.

    Args:
        disc: segments in nondimensional units (state may exclude the mass).
        boundary: boundary data in the same units.
        tau_ref: ``(N,)`` linearization points of the control deviation bound,
            normalized by ``u_max``.
        config: solver configuration.
        scaling: covariance units.
        w: slack penalty weight.

    Returns:
        ``(program, layout)``.
    """
    tau_ref = np.asarray(tau_ref, dtype=float)
    N, n, _ = disc.A.shape
    m = disc.B.shape[2]
    if tau_ref.shape != (N,):
        raise ValueError(f"tau_ref must have shape ({N},)")
    if np.any(tau_ref < 0):
        raise ValueError("tau_ref must be nonnegative")
    for name, val in (("x0", boundary.x0), ("xf", boundary.xf)):
        if np.shape(val) != (n,):
            raise ValueError(f"boundary {name} has shape {np.shape(val)}, expected ({n},)")
    if np.shape(boundary.P0) != (n, n) or np.shape(boundary.Pf) != (n, n):
        raise ValueError("boundary covariances do not match the state dimension")
    sn, sm = svec_dim(n), svec_dim(m)
    u = scaling.control
    q_beta = chi2_quantile_sqrt(m, config.beta_u)
    q_p = chi2_quantile_sqrt(m, config.p)
    sqrt_w = float(np.sqrt(w))

    prog = ConicProgram()
    X = prog.add_variables((N + 1, n), "x")
    F = prog.add_variables((N, m), "F")
    P = prog.add_variables((N + 1, sn), "P")
    U = prog.add_variables((N, m * n), "U")
    Y = prog.add_variables((N, sm), "Y")
    tau = prog.add_variables(N, "tau")
    eta = prog.add_variables(N, "eta")
    fnorm = prog.add_variables(N, "fnorm")
    quad = prog.add_variables(N, "quad")

    I_n = np.eye(n)
    mask = np.asarray(boundary.final_mask, dtype=bool)
    prog.add_equality([(X[0], I_n)], boundary.x0)
    prog.add_equality([(X[N][mask], np.eye(int(mask.sum())))], boundary.xf[mask])
    for k in range(N):
        prog.add_equality([(X[k + 1], I_n), (X[k], -disc.A[k]), (F[k], -u * disc.B[k])], disc.c[k])

    At, Bt, Qt = scale_segments(disc, scaling)
    P0 = scaling.to_program(boundary.P0)
    Pf = scaling.to_program(boundary.Pf)
    I_sn = np.eye(sn)
    prog.add_equality([(P[0], I_sn)], pack(P0))
    for k in range(N):
        prog.add_equality(
            [(P[k + 1], I_sn), (P[k], -congruence_map(At[k])), (U[k], -_cross_map(At[k], Bt[k])),
             (Y[k], -congruence_map(Bt[k]))],
            pack(Qt[k]),
        )
    if config.terminal_covariance_mode == EQUALITY:
        prog.add_equality([(P[N], I_sn)], pack(Pf))
    # A zero initial variance forces the matching column of U_0 to vanish.  Variances
    # below solver resolution are treated the same way so the node-0 gain stays defined.
    p0 = np.diag(P0)
    exact = np.flatnonzero(p0 <= config.initial_resolution * max(p0.max(), 0.0))
    if exact.size:
        cols = U[0].reshape(m, n)[:, exact].ravel()
        prog.add_equality([(cols, np.eye(cols.size))], np.zeros(cols.size))

    MP, MU, MY = _schur_maps(n, m)
    for k in range(N):
        prog.add_psd([(P[k], MP), (U[k], MU), (Y[k], MY)])

    eye_m = pack(np.eye(m))[:, None]
    I_sm = np.eye(sm)
    for k in range(N):
        prog.add_psd([(tau[k], 2.0 * tau_ref[k] * eye_m), (eta[k], eye_m / sqrt_w), (Y[k], -I_sm)],
                     -tau_ref[k] ** 2 * eye_m[:, 0])

    for k in range(N):
        prog.add_soc([(fnorm[k], 1.0), (F[k], np.eye(m), 1)])
    prog.add_nonneg([(fnorm, -1.0), (tau, -q_beta)], np.full(N, scaling.bound))
    prog.add_nonneg([(tau, 1.0)])
    prog.add_nonneg([(eta, 1.0)])
    for k in range(N):
        prog.add_soc([(quad[k], np.array([[1.0], [1.0], [0.0]])), (eta[k], np.array([[0.0], [0.0], [2.0]]))],
                     np.array([1.0, -1.0, 0.0]))
    if config.terminal_covariance_mode == UPPER_BOUND:
        prog.add_psd([(P[N], -I_sn)], pack(Pf))

    diag = pack(np.eye(m)) == 1.0
    prog.add_cost(fnorm, 1.0)
    prog.add_cost(tau, q_p)
    prog.add_cost(Y[:, diag], config.eps_Y)
    prog.add_cost(eta, 1.0 + 1.0 / sqrt_w)
    prog.add_cost(quad, 0.5)
    layout = SubproblemLayout(X, F, P, U, Y, tau, eta, fnorm, quad, sqrt_w)
    return prog, layout


def extract_iterate(x, layout: SubproblemLayout, tau_ref, n: int, m: int) -> SteeringIterate:
    N = layout.F.shape[0]
    return SteeringIterate(
        x=x[layout.x],
        F=x[layout.F],
        P=unpack(x[layout.P], n),
        U=x[layout.U].reshape(N, m, n),
        Y=unpack(x[layout.Y], m),
        tau=x[layout.tau],
        zeta=x[layout.eta] / layout.sqrt_w,
        tau_ref=np.asarray(tau_ref, dtype=float).copy(),
    )


def subproblem_costs(it: SteeringIterate, config: SolverConfig, w: float):
    """Return ``(J3, J_pen)`` of an iterate."""
    m = it.F.shape[1]
    q_p = chi2_quantile_sqrt(m, config.p)
    J3 = float(np.sum(np.linalg.norm(it.F, axis=1)) + q_p * np.sum(it.tau)
               + config.eps_Y * np.sum(np.trace(it.Y, axis1=1, axis2=2)))
    z = it.zeta
    J_pen = float(np.sum(z + 0.5 * w * z**2 + np.sqrt(w) * np.abs(z)))
    return J3, J_pen


def check_convergence(previous, current, config: SolverConfig):
    """Relative mean-trajectory change and slack test.

    ``previous`` may be an iterate or an array of stacked node means.
    """
    prev = np.asarray(getattr(previous, "x", previous), dtype=float)
    cur = np.asarray(current.x, dtype=float)
    if prev.shape != cur.shape:
        raise ValueError("iterates have different shapes")
    base = np.linalg.norm(prev)
    if base == 0:
        raise ValueError("previous mean trajectory has zero norm")
    shift = float(np.linalg.norm(cur - prev) / base)
    zeta_max = float(np.max(current.zeta, initial=0.0))
    converged = shift <= config.eps_x and zeta_max <= config.eps_zeta
    return converged, {"mean_shift": shift, "zeta_max": zeta_max}


def recover_gains(it: SteeringIterate, tol: float = 1e-6, singular_tol: float = 1e-10,
                  rel_cutoff: float = 1e-8):
    """Feedback gains ``K_k = U_k P_k^{-1}`` (program units).

    A node whose covariance is singular, or whose smallest eigenvalues are
    below solver precision (``rel_cutoff`` times the largest), uses the
    pseudo-inverse restricted to the resolved eigenspace.  The gain must then
    still satisfy ``|K P - U| <= tol``, otherwise the node is reported.
    """
    gains = []
    for k in range(it.U.shape[0]):
        P = 0.5 * (it.P[k] + it.P[k].T)
        lam = np.linalg.eigvalsh(P)
        if lam[0] > max(singular_tol, rel_cutoff * lam[-1]):
            K = np.linalg.solve(P, it.U[k].T).T
        else:
            K = it.U[k] @ np.linalg.pinv(P, rcond=max(rel_cutoff, singular_tol / max(lam[-1], 1e-300)),
                                         hermitian=True)
            if np.linalg.norm(K @ P - it.U[k]) > tol:
                raise SingularCovarianceError(
                    f"covariance at node {k} is singular (min eigenvalue {lam[0]:.3e})")
        gains.append(K)
    return np.array(gains)


@dataclass
class SteeringProblem:
    """A scenario expressed in nondimensional units."""

    scales: ScaleSet
    model: SpacecraftModel
    times: np.ndarray
    x0: np.ndarray
    xf: np.ndarray
    P0: np.ndarray
    Pf: np.ndarray
    mass_stochastic: bool

    @property
    def N(self) -> int:
        return self.times.size - 1

    @property
    def active(self) -> np.ndarray:
        """State components carried by the covariance program."""
        n_x = self.model.n_x
        return np.arange(n_x) if self.mass_stochastic else np.arange(n_x - 1)


def nondimensional_problem(scenario) -> SteeringProblem:
    scales = ScaleSet.canonical(scenario.params.mu, scenario.x_i[-1])
    params = scale_params(scenario.params, scales)
    model = SpacecraftModel(params, scenario.dim, mass_coupling=scenario.mass_stochastic)
    times = np.linspace(0.0, scenario.t_f / scales.time, scenario.N + 1)
    su = scales.state_units(model.n_x)
    return SteeringProblem(
        scales=scales,
        model=model,
        times=times,
        x0=np.asarray(scenario.x_i, dtype=float) / su,
        xf=np.asarray(scenario.x_f, dtype=float) / su,
        P0=np.asarray(scenario.P_i, dtype=float) / np.multiply.outer(su, su),
        Pf=np.asarray(scenario.P_f, dtype=float) / np.multiply.outer(su, su),
        mass_stochastic=scenario.mass_stochastic,
    )


@dataclass
class SteeringSolution:
    """Converged (or last) SCP iterate plus everything needed to use it.

    Means, feedforwards, covariances and gains are available in physical
    units (km, km/s, kg, kg*km/s^2) through the accessor methods.
    """

    problem: SteeringProblem
    iterate: SteeringIterate
    gains: np.ndarray
    discretization: Discretization
    scaling: CovarianceScaling
    config: SolverConfig
    history: list
    J3: float
    J_pen: float
    converged: bool
    states: np.ndarray
    controls: np.ndarray
    accurate: bool = True

    @property
    def iterations(self) -> int:
        return len(self.history)

    @property
    def N(self) -> int:
        return self.problem.N

    def feedforward_nd(self):
        return self.scaling.control * self.iterate.F

    def gains_nd(self):
        """Gains on the full state (mass column zero when mass is deterministic)."""
        s = self.scaling.state
        K = self.scaling.control * self.gains / s[None, None, :]
        n_x = self.problem.model.n_x
        full = np.zeros((K.shape[0], K.shape[1], n_x))
        full[:, :, self.problem.active] = K
        return full

    def covariances_nd(self):
        P = self.scaling.from_program(self.iterate.P)
        n_x = self.problem.model.n_x
        full = np.zeros((P.shape[0], n_x, n_x))
        a = self.problem.active
        full[:, a[:, None], a[None, :]] = P
        return full

    def times(self):
        return self.problem.times * self.problem.scales.time

    def means(self):
        return self.states * self.problem.scales.state_units(self.problem.model.n_x)

    def feedforward(self):
        return self.feedforward_nd() * self.problem.scales.force

    def covariances(self):
        su = self.problem.scales.state_units(self.problem.model.n_x)
        return self.covariances_nd() * np.multiply.outer(su, su)

    def gains_physical(self):
        su = self.problem.scales.state_units(self.problem.model.n_x)
        return self.gains_nd() * self.problem.scales.force / su[None, None, :]

    def propagated_covariances(self):
        """Closed-loop covariance of the recovered gains on the solved segments (program units)."""
        A, B, Q = scale_segments(self.discretization, self.scaling)
        from covsteer.discretize import DiscreteSegment
        segs = [DiscreteSegment(A[k], B[k], np.zeros(A.shape[1]), Q[k], None) for k in range(A.shape[0])]
        return propagate_covariance(segs, self.iterate.P[0], self.gains)


def initial_tau(config: SolverConfig, n_u: int, N: int, bound: float) -> np.ndarray:
    """Start value ``fraction * bound / sqrt(chi2_q(beta_u))`` on every segment."""
    return np.full(N, config.tau_init_fraction * bound / chi2_quantile_sqrt(n_u, config.beta_u))


def _log_line(i, w, J3, J_pen, zeta_max, shift, status):
    return f"{i}\t{w:.3e}\t{J3:.12e}\t{J_pen:.6e}\t{zeta_max:.6e}\t{shift:.6e}\t{status}"


def problem_boundary(prob: SteeringProblem) -> Boundary:
    a = prob.active
    return Boundary(
        x0=prob.x0[a],
        xf=np.nan_to_num(prob.xf[a]),
        final_mask=np.arange(a.size) < 2 * prob.model.dim,
        P0=prob.P0[np.ix_(a, a)],
        Pf=prob.Pf[np.ix_(a, a)],
    )


def census(scenario, config: SolverConfig | None = None) -> dict:
    """Variable and constraint counts of one SCP subproblem for ``scenario``.

    The counts do not depend on the linearization, so placeholder segments are used.
    """
    config = config or scenario.config
    prob = nondimensional_problem(scenario)
    n, m, N = prob.active.size, prob.model.n_u, prob.N
    disc = Discretization(A=np.broadcast_to(np.eye(n), (N, n, n)).copy(), B=np.ones((N, n, m)),
                          c=np.zeros((N, n)), Q=np.zeros((N, n, n)), end_states=np.zeros((N, n)))
    scaling = covariance_scaling(n, prob.model.params.u_max, config.d)
    prog, _ = build_subproblem(disc, problem_boundary(prob), initial_tau(config, m, N, scaling.bound),
                               config, scaling, config.w_schedule(1))
    return {"n_x": n, "n_u": m, "N": N, **prog.census()}


LOG_HEADER = "iteration\tw\tJ3\tJ_pen\tzeta_max\tmean_shift\tstatus"


def scp_solve(scenario, reference: ReferenceTrajectory, config: SolverConfig | None = None,
              log_sink: Callable[[str], None] | None = None) -> SteeringSolution:
    """Run the sequential convex programming loop.

    Args:
        scenario: problem definition (see :class:`covsteer.scenario.Scenario`).
        reference: nominal trajectory in physical units on the scenario grid.
        config: overrides ``scenario.config`` when given.
        log_sink: receives one tab-separated line per iteration.

    Raises:
        SubproblemError: a subproblem was not solved to optimality.
        ConvergenceError: ``max_iterations`` reached; carries the last solution.
    """
    config = config or scenario.config
    prob = nondimensional_problem(scenario)
    model, N = prob.model, prob.N
    if reference.N != N:
        raise ValueError(f"reference has {reference.N} segments, scenario has {N}")
    su = prob.scales.state_units(model.n_x)
    states = reference.states / su
    controls = reference.controls / prob.scales.force
    h = np.diff(prob.times)
    a = prob.active
    c_exh = model.params.exhaust_speed
    u_max = model.params.u_max

    boundary = problem_boundary(prob)
    scaling = covariance_scaling(a.size, u_max, config.d)
    tau_ref = initial_tau(config, model.n_u, N, scaling.bound)
    if not prob.mass_stochastic:
        states = states.copy()
        states[:, -1] = _mass_schedule(states[0, -1], controls, h, c_exh)
    previous = states[:, a]
    history = []
    sink = log_sink or (lambda line: log.info(line))
    sink(LOG_HEADER)
    solution = None
    for i in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        w = config.w_schedule(i)
        disc_full = discretize(model, states[:-1], controls, h, config.substeps)
        disc = disc_full if prob.mass_stochastic else disc_full.select(a)
        program, layout = build_subproblem(disc, boundary, tau_ref, config, scaling, w)
        result = conic.solve(program, config.solver)
        usable = result.ok or (config.accept_inaccurate and result.status == conic.INACCURATE)
        if not usable:
            sink(_log_line(i, w, np.nan, np.nan, np.nan, np.nan, result.status))
            raise SubproblemError(i, result.status, history)
        it = extract_iterate(result.primal, layout, tau_ref, a.size, model.n_u)
        J3, J_pen = subproblem_costs(it, config, w)
        it.P[0] = scaling.to_program(boundary.P0)
        converged, metrics = check_convergence(previous, it, config)
        record = {"iteration": i, "w": w, "J3": J3, "J_pen": J_pen, "J_aug": J3 + J_pen,
                  "status": result.status, "solver_iterations": result.diagnostics.get("iterations"),
                  "seconds": time.perf_counter() - t0, **metrics}
        history.append(record)
        sink(_log_line(i, w, J3, J_pen, metrics["zeta_max"], metrics["mean_shift"], result.status))

        new_controls = scaling.control * it.F
        new_states = states.copy()
        new_states[:, a] = it.x
        if not prob.mass_stochastic:
            new_states[:, -1] = _mass_schedule(states[0, -1], new_controls, h, c_exh)
        solution = SteeringSolution(
            problem=prob, iterate=it, gains=None, discretization=disc,
            scaling=scaling, config=config, history=history, J3=J3, J_pen=J_pen,
            converged=converged, states=new_states, controls=new_controls, accurate=result.ok,
        )
        if converged:
            solution.gains = recover_gains(it)
            return solution
        states, controls, previous = new_states, new_controls, it.x
        tau_ref = np.maximum(it.tau, 0.0)
    try:
        solution.gains = recover_gains(solution.iterate)
    except SingularCovarianceError as exc:
        log.warning("gains of the last iterate unavailable: %s", exc)
    raise ConvergenceError(solution)


def _mass_schedule(m0, controls, h, c_exh):
    """Mass along the mean driven by the feedforward thrust only."""
    burn = np.linalg.norm(controls, axis=1) * h / c_exh
    return m0 - np.concatenate([[0.0], np.cumsum(burn)])


def certify(solution: SteeringSolution) -> dict:
    """Constraint residuals of a solved iterate, in program units."""
    it = solution.iterate
    A, B, Q = scale_segments(solution.discretization, solution.scaling)
    m = it.F.shape[1]
    q_beta = chi2_quantile_sqrt(m, solution.config.beta_u)
    schur, rec, lin = [], [], []
    for k in range(A.shape[0]):
        Z = np.block([[it.P[k], it.U[k].T], [it.U[k], it.Y[k]]])
        schur.append(np.linalg.eigvalsh(Z)[0])
        Pn = (A[k] @ it.P[k] @ A[k].T + A[k] @ it.U[k].T @ B[k].T + B[k] @ it.U[k] @ A[k].T
              + B[k] @ it.Y[k] @ B[k].T + Q[k])
        rec.append(np.linalg.norm(Pn - it.P[k + 1]))
        t_ref = it.tau_ref[k]
        lin.append(np.linalg.eigvalsh(it.Y[k])[-1] - (2 * t_ref * it.tau[k] - t_ref**2 + it.zeta[k]))
    slack = solution.scaling.bound - np.linalg.norm(it.F, axis=1) - q_beta * it.tau
    disc = solution.discretization
    xs = it.x
    mean_res = max(np.max(np.abs(xs[k + 1] - disc.A[k] @ xs[k] - disc.B[k] @ (solution.scaling.control * it.F[k])
                                 - disc.c[k])) for k in range(A.shape[0]))
    out = {
        "schur_min_eig": float(np.min(schur)),
        "covariance_residual": float(np.max(rec)),
        "control_slack_min": float(np.min(slack)),
        "zeta_max": float(np.max(it.zeta)),
        "tau_linearization_violation": float(np.max(lin)),
        "mean_residual": float(mean_res),
        "Y_min_eig": float(min(np.linalg.eigvalsh(Y)[0] for Y in it.Y)),
    }
    if solution.config.terminal_covariance_mode == UPPER_BOUND:
        Pf = solution.scaling.to_program(
            solution.problem.Pf[np.ix_(solution.problem.active, solution.problem.active)])
        out["terminal_margin_min_eig"] = float(np.linalg.eigvalsh(Pf - it.P[-1])[0])
    return out
