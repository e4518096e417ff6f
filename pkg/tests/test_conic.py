import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covsteer import conic
from covsteer.conic import ConicProgram, ProgramError, congruence_map, pack, solve, unpack


def _random_symmetric(rng, n):
    M = rng.normal(size=(n, n))
    return M + M.T


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 8))
def test_pack_is_an_isometry(seed, n):
    rng = np.random.default_rng(seed)
    S, T = _random_symmetric(rng, n), _random_symmetric(rng, n)
    np.testing.assert_allclose(unpack(pack(S), n), S, rtol=0, atol=1e-14 * np.abs(S).max())
    np.testing.assert_allclose(pack(S) @ pack(T), np.trace(S.T @ T), rtol=1e-12, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(1, 5), m=st.integers(1, 5))
def test_congruence_map(seed, n, m):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(m, n))
    X = _random_symmetric(rng, n)
    np.testing.assert_allclose(congruence_map(M) @ pack(X), pack(M @ X @ M.T), atol=1e-12)


def test_equality_pins_variable():
    prog = ConicProgram()
    x = prog.add_variables(1)
    prog.add_equality([(x, 1.0)], 3.0)
    prog.add_cost(x, 1.0)
    sol = solve(prog)
    assert sol.status == conic.OPTIMAL
    np.testing.assert_allclose(sol.primal[x], 3.0, atol=1e-8)


def test_contradictory_equalities_are_infeasible():
    prog = ConicProgram()
    x = prog.add_variables(1)
    prog.add_equality([(x, 1.0)], 0.0)
    prog.add_equality([(x, 1.0)], 1.0)
    prog.add_cost(x, 1.0)
    assert solve(prog).status == conic.INFEASIBLE


def test_lp_lower_bound():
    prog = ConicProgram()
    x = prog.add_variables(1)
    prog.add_nonneg([(x, 1.0)], -2.0)
    prog.add_cost(x, 1.0)
    sol = solve(prog)
    assert sol.ok
    np.testing.assert_allclose(sol.objective, 2.0, atol=1e-7)


@pytest.mark.parametrize("z, expected", [((3.0, 4.0), 5.0), ((0.0, 0.0), 0.0)])
def test_soc_epigraph_of_norm(z, expected):
    prog = ConicProgram()
    t = prog.add_variables(1)
    zv = prog.add_variables(2)
    prog.add_equality([(zv, np.eye(2))], z)
    prog.add_soc([(t, 1.0), (zv, np.eye(2), 1)])
    prog.add_cost(t, 1.0)
    sol = solve(prog)
    assert sol.ok
    np.testing.assert_allclose(sol.objective, expected, atol=1e-7)


def test_soc_infeasible_when_norm_exceeds_bound():
    prog = ConicProgram()
    t = prog.add_variables(1)
    zv = prog.add_variables(2)
    prog.add_equality([(zv, np.eye(2))], [1.0, 1.0])
    prog.add_nonneg([(t, -1.0)], 1.0)
    prog.add_soc([(t, 1.0), (zv, np.eye(2), 1)])
    prog.add_cost(t, 1.0)
    assert solve(prog).status == conic.INFEASIBLE


def test_psd_scalar_block():
    prog = ConicProgram()
    x = prog.add_variables(1)
    prog.add_psd([(x, 1.0)])
    prog.add_cost(x, 1.0)
    sol = solve(prog)
    assert sol.ok
    np.testing.assert_allclose(sol.primal[x], 0.0, atol=1e-7)


def test_psd_off_diagonal_maximum():
    prog = ConicProgram()
    y = prog.add_variables(1)
    # packed [[1, y], [y, 1]] = (1, sqrt(2) y, 1)
    prog.add_psd([(y, np.array([[0.0], [np.sqrt(2)], [0.0]]))], [1.0, 0.0, 1.0])
    prog.add_cost(y, -1.0)
    sol = solve(prog)
    assert sol.ok
    np.testing.assert_allclose(sol.primal[y], 1.0, atol=1e-6)


def test_psd_shift_needs_lifting():
    prog = ConicProgram()
    X = prog.add_variables(3)
    prog.add_psd([(X, np.eye(3))], -pack(np.eye(2)))
    prog.add_nonneg([(X, -1.0)], 0.5 * np.ones(3))
    prog.add_cost(X, np.ones(3))
    assert solve(prog).status == conic.INFEASIBLE


def test_sdp_trace_above_identity():
    prog = ConicProgram()
    X = prog.add_variables(3)
    prog.add_psd([(X, np.eye(3))], -pack(np.eye(2)))
    prog.add_cost(X, pack(np.eye(2)))
    sol = solve(prog)
    assert sol.ok
    np.testing.assert_allclose(sol.objective, 2.0, atol=1e-7)
    assert np.linalg.eigvalsh(unpack(sol.primal[X]) - np.eye(2))[0] >= -1e-7
    again = solve(prog)
    assert abs(again.objective - sol.objective) <= 1e-8


def test_unbounded_program():
    prog = ConicProgram()
    x = prog.add_variables(1)
    prog.add_cost(x, 1.0)
    prog.add_nonneg([(x, -1.0)], 0.0)
    assert solve(prog).status == conic.UNBOUNDED


def test_program_validation():
    prog = ConicProgram()
    x = prog.add_variables(2)
    with pytest.raises(ProgramError):
        prog.add_equality([(np.array([5]), 1.0)], 0.0)
    with pytest.raises(ProgramError):
        prog.add_soc([(x[:0], np.zeros((0, 0)))])
    with pytest.raises(ProgramError):
        prog.add_psd([(x, np.eye(2))])


def test_census_and_dump(tmp_path):
    prog = ConicProgram()
    x = prog.add_variables(3)
    prog.add_equality([(x[:1], 1.0)], 2.0)
    prog.add_soc([(x, np.eye(3))])
    prog.add_psd([(x, np.eye(3))])
    prog.add_cost(x, 1.0)
    assert prog.census() == {"variables": 3, "equality_rows": 1, "nonneg_cones": 0, "nonneg_rows": 0,
                             "soc_cones": 1, "soc_rows": 3, "psd_cones": 1, "psd_rows": 3}
    path = tmp_path / "prog.txt"
    prog.dump(path)
    lines = path.read_text().splitlines()
    assert lines[:4] == ["# covsteer conic program v1", "variables 3", "rows 7", "cones 3"]
    assert "cone 0 zero 1 0" in lines and "cone 1 soc 3 1" in lines and "cone 2 psd 3 4" in lines
    assert "A 0 0 1.0" in lines and "b 0 2.0" in lines
