"""Standard-form conic programs (zero, nonnegative, second-order and PSD cones).

A :class:`ConicProgram` stores a linear cost, a sparse equality system and an
ordered list of cone memberships ``G x + h in K``.  PSD blocks use the
lower-triangular row-wise vectorization with off-diagonals scaled by
``sqrt(2)`` (:func:`pack`), which is an isometry for the trace inner product.
:func:`solve` hands the program to Clarabel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from covsteer.tables import atomic_write

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITERATIONS = "max-iterations"
NUMERICAL_FAILURE = "numerical-failure"
INACCURATE = "inaccurate"


def svec_dim(n: int) -> int:
    return n * (n + 1) // 2


def tril_indices(n: int):
    """Row/column indices of the packed ordering (lower triangle, row-wise)."""
    rows, cols = [], []
    for i in range(n):
        for j in range(i + 1):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def pack(S):
    """Packed vector of a symmetric matrix (or a stack of them)."""
    S = np.asarray(S, dtype=float)
    n = S.shape[-1]
    i, j = tril_indices(n)
    w = np.where(i == j, 1.0, SQRT2)
    return S[..., i, j] * w


def unpack(v, n: int | None = None):
    v = np.asarray(v, dtype=float)
    if n is None:
        n = int(round((np.sqrt(8 * v.shape[-1] + 1) - 1) / 2))
    i, j = tril_indices(n)
    w = np.where(i == j, 1.0, 1.0 / SQRT2)
    S = np.zeros(v.shape[:-1] + (n, n))
    S[..., i, j] = v * w
    S[..., j, i] = v * w
    return S


def sym_basis(n: int) -> np.ndarray:
    """Orthonormal symmetric basis matrices ``E_t`` with ``pack(E_t) = e_t``."""
    return unpack(np.eye(svec_dim(n)), n)


def congruence_map(M) -> np.ndarray:
    """Matrix ``L`` with ``pack(M X M^T) = L pack(X)`` for symmetric ``X``."""
    M = np.asarray(M, dtype=float)
    E = sym_basis(M.shape[1])
    return pack(M @ E @ M.T).T


class ProgramError(ValueError):
    pass


@dataclass
class Cone:
    kind: str
    dim: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    const: np.ndarray


@dataclass
class ConicSolution:
    """Result of :func:`solve`.

    ``primal`` is ``None`` unless the status is ``optimal``.
    """

    status: str
    primal: np.ndarray | None
    objective: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


class ConicProgram:
    """Incrementally built conic program ``min q^T x``.

    Constraint blocks are given as affine maps ``sum_b C_b x[idx_b] + h``.
    Each term is ``(idx, C)`` or ``(idx, C, row0)``: variable indices, a dense
    coefficient block (a scalar or 1-D array scales elementwise) and the first
    row the block occupies.
    """

    def __init__(self):
        self.n_variables = 0
        self._cost = {}
        self._eq = []
        self.cones: list[Cone] = []
        self.names: dict[str, np.ndarray] = {}

    def add_variables(self, shape, name: str | None = None) -> np.ndarray:
        count = int(np.prod(shape))
        idx = np.arange(self.n_variables, self.n_variables + count).reshape(shape)
        self.n_variables += count
        if name is not None:
            self.names[name] = idx
        return idx

    def add_cost(self, idx, coef=1.0):
        idx = np.ravel(idx)
        coef = np.broadcast_to(np.asarray(coef, dtype=float), idx.shape)
        for i, c in zip(idx, coef):
            self._cost[int(i)] = self._cost.get(int(i), 0.0) + float(c)

    @property
    def cost(self) -> np.ndarray:
        q = np.zeros(self.n_variables)
        for i, c in self._cost.items():
            q[i] = c
        return q

    def _affine(self, terms, const):
        rows, cols, vals = [], [], []
        dim = 0 if const is None else np.size(const)
        for term in terms:
            idx, C = term[0], term[1]
            row0 = term[2] if len(term) > 2 else 0
            idx = np.ravel(np.asarray(idx))
            if idx.size and (idx.min() < 0 or idx.max() >= self.n_variables):
                raise ProgramError("variable index out of range")
            C = np.asarray(C, dtype=float)
            if C.ndim < 2:
                C = np.diag(np.broadcast_to(C, idx.shape))
            if C.shape[1] != idx.size:
                raise ProgramError(f"coefficient block {C.shape} does not match {idx.size} variables")
            r, c = np.nonzero(C)
            rows.append(r + row0)
            cols.append(idx[c])
            vals.append(C[r, c])
            dim = max(dim, row0 + C.shape[0])
        if const is None:
            const = np.zeros(dim)
        else:
            const = np.broadcast_to(np.asarray(const, dtype=float).ravel(), (dim,)).copy()
            if np.size(const) != dim:
                raise ProgramError("constant does not match the affine map")

        def cat(xs, t):
            return np.concatenate(xs).astype(t) if xs else np.zeros(0, dtype=t)

        return cat(rows, int), cat(cols, int), cat(vals, float), const

    def add_equality(self, terms, rhs) -> int:
        """Append rows ``sum C x[idx] = rhs``; returns a handle."""
        r, c, v, b = self._affine(terms, rhs)
        self._eq.append(Cone("zero", b.size, r, c, v, b))
        return len(self._eq) - 1

    def add_nonneg(self, terms, const=None) -> int:
        """``sum C x[idx] + const >= 0`` elementwise."""
        return self._add_cone("nonneg", terms, const)

    def add_soc(self, terms, const=None) -> int:
        """Second-order cone: first entry ``t``, remainder ``z``, ``|z| <= t``."""
        return self._add_cone("soc", terms, const)

    def add_psd(self, terms, const=None) -> int:
        """Packed symmetric block must be positive semidefinite."""
        return self._add_cone("psd", terms, const)

    def _add_cone(self, kind, terms, const):
        r, c, v, h = self._affine(terms, const)
        if h.size == 0:
            raise ProgramError("cone of dimension 0")
        if kind == "psd":
            side = int(round((np.sqrt(8 * h.size + 1) - 1) / 2))
            if svec_dim(side) != h.size:
                raise ProgramError(f"{h.size} is not a packed PSD dimension")
        self.cones.append(Cone(kind, h.size, r, c, v, h))
        return len(self.cones) - 1

    @property
    def equalities(self) -> list[Cone]:
        return self._eq

    def census(self) -> dict:
        count = {"variables": self.n_variables,
                 "equality_rows": sum(e.dim for e in self._eq)}
        for kind in ("nonneg", "soc", "psd"):
            cones = [c for c in self.cones if c.kind == kind]
            count[f"{kind}_cones"] = len(cones)
            count[f"{kind}_rows"] = sum(c.dim for c in cones)
        return count

    def assemble(self):
        """Clarabel data ``(q, A, b, cones)`` with ``A x + s = b``, ``s in K``."""
        import clarabel

        rows, cols, vals, b = [], [], [], []
        cones = []
        offset = 0
        neq = sum(e.dim for e in self._eq)
        if neq:
            for e in self._eq:
                rows.append(e.rows + offset)
                cols.append(e.cols)
                vals.append(e.vals)
                b.append(e.const)
                offset += e.dim
            cones.append(clarabel.ZeroConeT(neq))
        for cone in self.cones:
            rows.append(cone.rows + offset)
            cols.append(cone.cols)
            vals.append(-cone.vals)
            b.append(cone.const)
            offset += cone.dim
            if cone.kind == "nonneg":
                cones.append(clarabel.NonnegativeConeT(cone.dim))
            elif cone.kind == "soc":
                cones.append(clarabel.SecondOrderConeT(cone.dim))
            else:
                cones.append(clarabel.PSDTriangleConeT(int(round((np.sqrt(8 * cone.dim + 1) - 1) / 2))))
        A = sp.csc_matrix(
            (np.concatenate(vals) if vals else [], (np.concatenate(rows) if rows else [], np.concatenate(cols) if cols else [])),
            shape=(offset, self.n_variables),
        )
        A.sum_duplicates()
        return self.cost, A, (np.concatenate(b) if b else np.zeros(0)), cones

    def residuals(self, x) -> dict:
        """Primal equality residual and worst cone violation at ``x``."""
        eq = 0.0
        for e in self._eq:
            val = np.bincount(e.rows, weights=e.vals * x[e.cols], minlength=e.dim) - e.const
            eq = max(eq, np.max(np.abs(val), initial=0.0))
        viol = 0.0
        for cone in self.cones:
            s = np.bincount(cone.rows, weights=cone.vals * x[cone.cols], minlength=cone.dim) + cone.const
            if cone.kind == "nonneg":
                v = -np.min(s)
            elif cone.kind == "soc":
                v = np.linalg.norm(s[1:]) - s[0]
            else:
                v = -np.linalg.eigvalsh(unpack(s))[0]
            viol = max(viol, v)
        return {"equality": eq, "cone": max(viol, 0.0)}

    def dump(self, path):
        """Write the assembled triplets as text (see README for the layout)."""
        q, A, b, _ = self.assemble()
        A = A.tocoo()
        lines = ["# covsteer conic program v1", f"variables {self.n_variables}",
                 f"rows {A.shape[0]}", f"cones {len(self.cones) + (1 if self._eq else 0)}"]
        offset = 0
        cid = 0
        if self._eq:
            total = sum(e.dim for e in self._eq)
            lines.append(f"cone {cid} zero {total} {offset}")
            offset += total
            cid += 1
        for cone in self.cones:
            lines.append(f"cone {cid} {cone.kind} {cone.dim} {offset}")
            offset += cone.dim
            cid += 1
        lines += [f"cost {i} {float(c)!r}" for i, c in enumerate(q) if c != 0.0]
        order = np.lexsort((A.col, A.row))
        lines += [f"A {A.row[k]} {A.col[k]} {float(A.data[k])!r}" for k in order]
        lines += [f"b {i} {float(v)!r}" for i, v in enumerate(b) if v != 0.0]
        atomic_write(path, "\n".join(lines) + "\n")


@dataclass
class SolverSettings:
    """Interior-point settings.

    When a run ends without an accepted solution, the solve is repeated with
    each entry of ``retries`` (Clarabel setting overrides) in turn.
    """

    tol_feas: float = 1e-8
    tol_gap: float = 1e-8
    max_iter: int = 200
    accept_tol: float = 1e-7
    inaccurate_tol: float = 1e-5
    verbose: bool = False
    retries: tuple = (
        {"equilibrate_enable": False},
        {"iterative_refinement_reltol": 1e-14, "iterative_refinement_abstol": 1e-14,
         "iterative_refinement_max_iter": 50},
    )


_STATUS = {
    "PrimalInfeasible": INFEASIBLE,
    "AlmostPrimalInfeasible": INFEASIBLE,
    "DualInfeasible": UNBOUNDED,
    "AlmostDualInfeasible": UNBOUNDED,
    "MaxIterations": MAX_ITERATIONS,
    "MaxTime": MAX_ITERATIONS,
}


def solve(program: ConicProgram, settings: SolverSettings | None = None) -> ConicSolution:
    """Solve with Clarabel; never raises on solver trouble.

    A ``Solved`` or ``AlmostSolved`` result is reported ``optimal`` only if
    the independently recomputed equality residual and cone violation are
    within ``settings.accept_tol``, and ``inaccurate`` (primal returned, but
    ``ok`` is False) if they are within ``settings.inaccurate_tol``.
    Infeasibility certificates are final; other outcomes trigger the
    configured retries and the most accurate attempt is returned.
    """
    settings = settings or SolverSettings()
    data = program.assemble()
    attempts = []
    best = None
    for overrides in ({},) + tuple(settings.retries):
        result = _solve_once(program, data, settings, overrides)
        attempts.append(result.diagnostics.get("raw_status"))
        if result.ok or result.status in (INFEASIBLE, UNBOUNDED):
            best = result
            break
        if best is None or _worst(result) < _worst(best):
            best = result
    best.diagnostics["attempts"] = attempts
    return best


def _worst(result) -> float:
    if result.primal is None:
        return np.inf
    return max(result.diagnostics["equality"], result.diagnostics["cone"])


def _solve_once(program, data, settings, overrides) -> ConicSolution:
    import clarabel

    q, A, b, cones = data
    opts = clarabel.DefaultSettings()
    opts.verbose = settings.verbose
    opts.tol_feas = settings.tol_feas
    opts.tol_gap_abs = settings.tol_gap
    opts.tol_gap_rel = settings.tol_gap
    opts.max_iter = settings.max_iter
    for key, value in overrides.items():
        setattr(opts, key, value)
    P = sp.csc_matrix((program.n_variables, program.n_variables))
    try:
        result = clarabel.DefaultSolver(P, q, A, b, cones, opts).solve()
    except Exception as exc:  # solver-internal failure is reported, not raised
        log.warning("clarabel raised %s", exc)
        return ConicSolution(NUMERICAL_FAILURE, None, np.nan, {"raw_status": "error", "error": str(exc)})
    raw = str(result.status)
    diag = {"raw_status": raw, "iterations": result.iterations,
            "solve_time": result.solve_time, "r_prim": result.r_prim, "r_dual": result.r_dual}
    if raw in ("Solved", "AlmostSolved"):
        x = np.asarray(result.x, dtype=float)
        res = program.residuals(x)
        diag.update(res)
        worst = max(res["equality"], res["cone"])
        if worst <= settings.accept_tol:
            return ConicSolution(OPTIMAL, x, float(q @ x), diag)
        if worst <= settings.inaccurate_tol:
            return ConicSolution(INACCURATE, x, float(q @ x), diag)
        return ConicSolution(NUMERICAL_FAILURE, None, float(q @ x), diag)
    return ConicSolution(_STATUS.get(raw, NUMERICAL_FAILURE), None, np.nan, diag)
