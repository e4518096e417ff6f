from types import SimpleNamespace

import numpy as np
import pytest
from scipy.optimize import linprog

from covsteer.discretize import ReferenceTrajectory, propagate_nonlinear
from covsteer.dynamics import NEWTON, SpacecraftModel
from covsteer.reference import (
    ReferenceFormatError,
    load_reference,
    solve_reference,
    solve_reference_nd,
    write_reference,
)
from covsteer.steering import scp_solve

from conftest import small_transfer


class Rocket1D:
    """Rest-to-rest rocket on a line: state ``[r, v, m]``, control ``[u, s]`` with ``|u| <= s``."""

    dim, n_x, n_u, n_w = 1, 3, 2, 1

    def __init__(self, u_max, exhaust_speed):
        self.params = SimpleNamespace(u_max=u_max, exhaust_speed=exhaust_speed)

    def drift(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        return np.stack([x[..., 1], u[..., 0] / x[..., 2], -u[..., 1] / self.params.exhaust_speed], axis=-1)

    def diffusion(self, x):
        return np.zeros(np.shape(x) + (1,))

    def linearize(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        batch = x.shape[:-1]
        A = np.zeros(batch + (3, 3))
        B = np.zeros(batch + (3, 2))
        A[..., 0, 1] = 1.0
        A[..., 1, 2] = -u[..., 0] / x[..., 2] ** 2
        B[..., 1, 0] = 1.0 / x[..., 2]
        B[..., 2, 1] = -1.0 / self.params.exhaust_speed
        return self.drift(x, u), A, B


def test_double_integrator_min_fuel_matches_lp():
    N, T, D, u_max = 20, 1.0, 0.2, 2.0
    model = Rocket1D(u_max, exhaust_speed=1e7)
    times = np.linspace(0.0, T, N + 1)
    guess = np.column_stack([D * times / T, np.full(N + 1, D / T), np.ones(N + 1)])
    X, W, info = solve_reference_nd(model, times, [0.0, 0.0, 1.0], [D, 0.0, 1.0],
                                    final_mask=[True, True, False], guess=guess)
    impulse = np.sum(np.abs(W[:, 0])) * (T / N)
    h = T / N
    # exact ZOH discretization of the unit-mass double integrator
    rows = np.array([[(T - (k + 1) * h) * h + h**2 / 2, h] for k in range(N)]).T
    res = linprog(np.full(2 * N, h), A_eq=np.hstack([rows, -rows]), b_eq=[D, 0.0],
                  bounds=[(0, u_max)] * (2 * N), method="highs")
    assert res.status == 0
    np.testing.assert_allclose(impulse, res.fun, rtol=1e-3)
    assert np.all(np.abs(W[:, 0]) <= u_max + 1e-6)
    burning = np.abs(W[:, 0]) > 1e-3 * u_max
    # bang-off-bang: accelerate, coast, brake
    assert W[0, 0] > 0 and W[-1, 0] < 0 and not burning[N // 2]


def test_coasting_transfer_needs_no_thrust():
    sc = small_transfer(days=60.0, N=10)
    model = SpacecraftModel(sc.params, 2)
    end = propagate_nonlinear(model, sc.x_i, np.zeros((sc.N, 2)), np.full(sc.N, sc.t_f / sc.N))[-1]
    x_f = end.copy()
    x_f[-1] = np.nan
    ref = solve_reference(sc.replace(x_f=x_f))
    np.testing.assert_allclose(ref.controls, 0.0, atol=1e-9 * sc.params.u_max)
    np.testing.assert_allclose(ref.states[:, -1], sc.x_i[-1], rtol=1e-9)


def test_reference_is_self_consistent(small_scenario, small_reference):
    ref = small_reference
    sc = small_scenario
    model = SpacecraftModel(sc.params, 2)
    h = np.diff(ref.times)
    nodes = propagate_nonlinear(model, ref.states[0], ref.controls, h)
    su = np.array([1.495978707e8] * 2 + [29.78] * 2 + [5000.0])
    assert np.max(np.abs(nodes - ref.states) / su) <= 1e-8
    burn = np.linalg.norm(ref.controls, axis=1) * h / sc.params.exhaust_speed
    np.testing.assert_allclose(ref.states[:, -1], sc.x_i[-1] - np.concatenate([[0.0], np.cumsum(burn)]),
                               rtol=1e-10)
    assert np.all(np.linalg.norm(ref.controls, axis=1) <= sc.params.u_max * (1 + 1e-6))
    miss = np.abs(ref.states[-1, :4] - sc.x_f[:4]) / su[:4]
    assert np.max(miss) <= 1e-6


def test_reference_file_round_trip(tmp_path, small_reference):
    path = tmp_path / "ref.txt"
    write_reference(path, small_reference)
    back = load_reference(path)
    np.testing.assert_array_equal(back.times, small_reference.times)
    np.testing.assert_array_equal(back.states, small_reference.states)
    np.testing.assert_allclose(back.controls, small_reference.controls, rtol=1e-15, atol=0)


def _write_rows(path, rows, n_x=5, n_u=2, units=None):
    units = units or "s km km km/s km/s kg N N"
    head = ["# covsteer reference", f"# n_x {n_x}", f"# n_u {n_u}", f"# N {len(rows) - 1}", f"# units {units}"]
    path.write_text("\n".join(head + [" ".join(map(str, r)) for r in rows]) + "\n")


def test_load_reference_rejects_bad_files(tmp_path):
    good = [[0, 1e8, 0, 0, 30, 1000, 0.1, 0], [10, 1e8, 300, 0, 30, 999, 0.1, 0], [20, 1e8, 600, 0, 30, 998, "nan", "nan"]]
    path = tmp_path / "ok.txt"
    _write_rows(path, good)
    assert load_reference(path).N == 2
    bad_time = [list(r) for r in good]
    bad_time[2][0] = 5
    _write_rows(path, bad_time)
    with pytest.raises(ReferenceFormatError, match="row 2"):
        load_reference(path)
    bad_mass = [list(r) for r in good]
    bad_mass[1][5] = -1
    _write_rows(path, bad_mass)
    with pytest.raises(ReferenceFormatError, match="nonpositive mass"):
        load_reference(path)
    _write_rows(path, good, units="s m m m/s m/s kg N N")
    with pytest.raises(ReferenceFormatError, match="units"):
        load_reference(path)
    short = [r[:-1] for r in good]
    _write_rows(path, short)
    with pytest.raises(ReferenceFormatError, match="line 6"):
        load_reference(path)


def test_loaded_reference_drives_solver(tmp_path, small_scenario, small_reference, small_solution):
    path = tmp_path / "ref.txt"
    write_reference(path, small_reference)
    sol = scp_solve(small_scenario, load_reference(path), log_sink=lambda line: None)
    assert sol.converged
    np.testing.assert_allclose(sol.J3, small_solution.J3, rtol=1e-6)


def test_reference_trajectory_validation():
    with pytest.raises(ValueError, match="row 1"):
        ReferenceTrajectory([0.0, 0.0, 1.0], np.ones((3, 3)), np.ones((2, 2)))
    with pytest.raises(ValueError):
        ReferenceTrajectory([0.0, 1.0], np.ones((2, 3)), np.ones((2, 2)))
    rising = ReferenceTrajectory([0.0, 1.0], [[0, 0, 1.0], [0, 0, 2.0]], [[1.0 * NEWTON]])
    with pytest.raises(ValueError, match="increases"):
        rising.validate_mass()
