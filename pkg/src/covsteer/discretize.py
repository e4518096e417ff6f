"""Zero-order-hold discretization of the linearized SDE and moment propagation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SUBSTEPS = 32


class DiscretizationError(RuntimeError):
    pass


@dataclass
class ReferenceTrajectory:
    """Nominal nodes, zero-order-hold controls and epochs.

    Attributes:
        times: ``(N+1,)`` strictly increasing epochs.
        states: ``(N+1, n_x)`` node states.
        controls: ``(N, n_u)`` controls held over each segment.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.states.shape[0] != self.times.size:
            raise ValueError("one state per epoch is required")
        if self.controls.shape[0] != self.times.size - 1:
            raise ValueError("node count must equal control count + 1")
        bad = np.flatnonzero(np.diff(self.times) <= 0)
        if bad.size:
            raise ValueError(f"times must be strictly increasing (row {bad[0] + 1})")

    @property
    def N(self) -> int:
        return self.controls.shape[0]

    def validate_mass(self, tol: float = 1e-9):
        """Check positive masses that never increase along thrust arcs."""
        m = self.states[:, -1]
        bad = np.flatnonzero(m <= 0)
        if bad.size:
            raise ValueError(f"nonpositive mass at row {bad[0]}")
        thrusting = np.linalg.norm(self.controls, axis=1) > 0
        rising = np.flatnonzero(thrusting & (np.diff(m) > tol * np.abs(m[:-1])))
        if rising.size:
            raise ValueError(f"mass increases on thrust segment {rising[0]}")


@dataclass
class DiscreteSegment:
    """``x_{k+1} = A x_k + B u_k + c + G w_k`` with ``w_k ~ N(0, I)``."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    G: np.ndarray


@dataclass
class Discretization:
    """Stacked segments; ``end_states`` is the nonlinear flow of each node."""

    A: np.ndarray
    B: np.ndarray
    c: np.ndarray
    Q: np.ndarray
    end_states: np.ndarray

    @property
    def N(self) -> int:
        return self.A.shape[0]

    def segment(self, k: int) -> DiscreteSegment:
        return DiscreteSegment(self.A[k], self.B[k], self.c[k], self.Q[k], sqrt_factor(self.Q[k]))

    def segments(self) -> list[DiscreteSegment]:
        return [self.segment(k) for k in range(self.N)]

    def select(self, idx) -> "Discretization":
        """Restrict to the state components ``idx`` (inputs unchanged)."""
        idx = np.asarray(idx)
        return Discretization(
            self.A[:, idx][:, :, idx],
            self.B[:, idx],
            self.c[:, idx],
            self.Q[:, idx][:, :, idx],
            self.end_states[:, idx],
        )


def _augmented_rhs(model, x, u, Phi, Bt, ct, Qt):
    f, A, B = model.linearize(x, u)
    c = f - np.einsum("...ij,...j->...i", A, x) - np.einsum("...ij,...j->...i", B, u)
    G = model.diffusion(x)
    dPhi = A @ Phi
    dBt = A @ Bt + B
    dct = np.einsum("...ij,...j->...i", A, ct) + c
    AQ = A @ Qt
    dQt = AQ + np.swapaxes(AQ, -1, -2) + G @ np.swapaxes(G, -1, -2)
    return f, dPhi, dBt, dct, dQt


def discretize(model, states, controls, durations, substeps: int = SUBSTEPS) -> Discretization:
    """Discretize every segment in one vectorized RK4 pass.

    Within segment ``k`` the reference is the nonlinear flow from
    ``states[k]`` under the held control ``controls[k]``; ``A(t)``, ``B(t)``,
    ``c(t)`` and ``G(t)`` are evaluated along that in-segment solution.  The
    state transition matrix and the three convolution integrals are obtained
    as ODEs integrated alongside the state.

    Args:
        model: dynamics handle with ``linearize`` and ``diffusion``.
        states: ``(N, n_x)`` segment start states.
        controls: ``(N, n_u)`` held controls.
        durations: scalar or ``(N,)`` segment lengths.
        substeps: fixed RK4 steps per segment.
    """
    x = np.array(states, dtype=float, ndmin=2)
    u = np.array(controls, dtype=float, ndmin=2)
    N, n = x.shape
    m = u.shape[1]
    h = np.broadcast_to(np.asarray(durations, dtype=float), (N,)) / substeps
    Phi = np.broadcast_to(np.eye(n), (N, n, n)).copy()
    Bt = np.zeros((N, n, m))
    ct = np.zeros((N, n))
    Qt = np.zeros((N, n, n))
    hv, hm = h[:, None], h[:, None, None]
    for _ in range(substeps):
        k1 = _augmented_rhs(model, x, u, Phi, Bt, ct, Qt)
        k2 = _augmented_rhs(model, x + 0.5 * hv * k1[0], u, Phi + 0.5 * hm * k1[1],
                            Bt + 0.5 * hm * k1[2], ct + 0.5 * hv * k1[3], Qt + 0.5 * hm * k1[4])
        k3 = _augmented_rhs(model, x + 0.5 * hv * k2[0], u, Phi + 0.5 * hm * k2[1],
                            Bt + 0.5 * hm * k2[2], ct + 0.5 * hv * k2[3], Qt + 0.5 * hm * k2[4])
        k4 = _augmented_rhs(model, x + hv * k3[0], u, Phi + hm * k3[1], Bt + hm * k3[2],
                            ct + hv * k3[3], Qt + hm * k3[4])
        x = x + hv / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        Phi = Phi + hm / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        Bt = Bt + hm / 6.0 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        ct = ct + hv / 6.0 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        Qt = Qt + hm / 6.0 * (k1[4] + 2 * k2[4] + 2 * k3[4] + k4[4])
    if not (np.all(np.isfinite(Phi)) and np.all(np.isfinite(x))):
        raise DiscretizationError("integration produced non-finite values")
    return Discretization(Phi, Bt, ct, clamp_psd(Qt), x)


def discretize_reference(model, reference: ReferenceTrajectory, substeps: int = SUBSTEPS) -> Discretization:
    return discretize(model, reference.states[:-1], reference.controls,
                      np.diff(reference.times), substeps)


def discretize_segment(reference: ReferenceTrajectory, k: int, model,
                       substeps: int = SUBSTEPS) -> DiscreteSegment:
    if not 0 <= k < reference.N:
        raise IndexError(f"segment index {k} outside [0, {reference.N})")
    disc = discretize(model, reference.states[k : k + 1], reference.controls[k : k + 1],
                      reference.times[k + 1] - reference.times[k], substeps)
    return disc.segment(0)


def propagate_nonlinear(model, x0, controls, durations, substeps: int = SUBSTEPS):
    """RK4 propagation of the deterministic drift; returns all ``N+1`` nodes."""
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    h = np.broadcast_to(np.asarray(durations, dtype=float), (controls.shape[0],)) / substeps
    nodes = [np.asarray(x0, dtype=float)]
    x = nodes[0]
    for k, u in enumerate(controls):
        for _ in range(substeps):
            k1 = model.drift(x, u)
            k2 = model.drift(x + 0.5 * h[k] * k1, u)
            k3 = model.drift(x + 0.5 * h[k] * k2, u)
            k4 = model.drift(x + h[k] * k3, u)
            x = x + h[k] / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        nodes.append(x)
    return np.array(nodes)


def flow_segments(model, states, controls, durations, substeps: int = SUBSTEPS):
    """Propagate every node independently over its own segment (vectorized)."""
    x = np.array(states, dtype=float, ndmin=2)
    u = np.array(controls, dtype=float, ndmin=2)
    h = (np.broadcast_to(np.asarray(durations, dtype=float), (x.shape[0],)) / substeps)[:, None]
    for _ in range(substeps):
        k1 = model.drift(x, u)
        k2 = model.drift(x + 0.5 * h * k1, u)
        k3 = model.drift(x + 0.5 * h * k2, u)
        k4 = model.drift(x + h * k3, u)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def clamp_psd(Q, tol: float = 1e-9):
    """Symmetrize a stack of matrices and clamp tiny negative eigenvalues to 0.

    Raises if the clamped eigenvalue mass exceeds ``tol`` times the matrix scale.
    """
    Q = 0.5 * (Q + np.swapaxes(Q, -1, -2))
    lam, V = np.linalg.eigh(Q)
    scale = np.maximum(1.0, np.abs(lam).max(axis=-1, initial=0.0))
    clamped = np.clip(-lam, 0.0, None).sum(axis=-1)
    if np.any(clamped > tol * scale):
        raise DiscretizationError(f"process noise matrix is indefinite "
                                  f"(clamped {clamped.max():.3e})")
    if not np.any(lam < 0):
        return Q
    Qc = (V * np.clip(lam, 0.0, None)[..., None, :]) @ np.swapaxes(V, -1, -2)
    return 0.5 * (Qc + np.swapaxes(Qc, -1, -2))


def sqrt_factor(Q, sym_tol: float = 1e-9, neg_tol: float = 1e-8):
    """Return ``G`` with ``G G^T = Q`` via a clamped symmetric eigendecomposition."""
    Q = np.asarray(Q, dtype=float)
    scale = max(1.0, np.max(np.abs(Q), initial=0.0))
    if np.max(np.abs(Q - Q.T), initial=0.0) > sym_tol * scale:
        raise ValueError("matrix is not symmetric")
    lam, V = np.linalg.eigh(0.5 * (Q + Q.T))
    if lam.size and lam[0] < -neg_tol * scale:
        raise ValueError(f"matrix is indefinite (eigenvalue {lam[0]:.3e})")
    return V * np.sqrt(np.clip(lam, 0.0, None))


def _as_stack(segments):
    if isinstance(segments, Discretization):
        return segments.A, segments.B, segments.c, segments.Q
    return (np.array([s.A for s in segments]), np.array([s.B for s in segments]),
            np.array([s.c for s in segments]), np.array([s.Q for s in segments]))


def propagate_mean(segments, x0, feedforwards):
    """Mean recursion ``x_{k+1} = A_k x_k + B_k F_k + c_k``."""
    A, B, c, _ = _as_stack(segments)
    F = np.atleast_2d(np.asarray(feedforwards, dtype=float))
    if F.shape[0] != A.shape[0]:
        raise ValueError(f"{A.shape[0]} segments but {F.shape[0]} feedforwards")
    xs = [np.asarray(x0, dtype=float)]
    for k in range(A.shape[0]):
        xs.append(A[k] @ xs[-1] + B[k] @ F[k] + c[k])
    return np.array(xs)


def propagate_covariance(segments, P0, gains=None):
    """Closed-loop recursion ``P_{k+1} = (A + B K) P (A + B K)^T + Q``."""
    A, B, _, Q = _as_stack(segments)
    P0 = np.asarray(P0, dtype=float)
    if P0.shape != A.shape[1:]:
        raise ValueError("P0 does not match the state dimension")
    Ps = [0.5 * (P0 + P0.T)]
    for k in range(A.shape[0]):
        Acl = A[k] if gains is None else A[k] + B[k] @ np.asarray(gains[k])
        P = Acl @ Ps[-1] @ Acl.T + Q[k]
        Ps.append(0.5 * (P + P.T))
    return np.array(Ps)
