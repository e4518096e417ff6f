import json

import numpy as np
import pytest
import yaml
from hypothesis import given, settings, strategies as st
from scipy import stats

from covsteer.cli import EXIT_CODES, main
from covsteer.dynamics import DAY, NEWTON, PhysicalParams
from covsteer.reference import write_reference
from covsteer.report import EllipseError, emit_ellipses, write_ellipses
from covsteer.scenario import (ScenarioError, load_preset, parse_scenario, scenario_from_dict, scenario_to_dict,
                               write_scenario)
from covsteer.tables import TableFormatError, from_tril, read_table, tril_values, write_table

from conftest import small_transfer


def assert_same_scenario(a, b):
    assert (a.name, a.dim, a.N, a.mass_stochastic) == (b.name, b.dim, b.N, b.mass_stochastic)
    assert a.t_f == b.t_f
    assert a.params == b.params
    np.testing.assert_array_equal(a.x_i, b.x_i)
    np.testing.assert_array_equal(a.x_f, b.x_f)
    np.testing.assert_array_equal(a.P_i, b.P_i)
    np.testing.assert_array_equal(a.P_f, b.P_f)
    for name in ("beta_u", "p", "eps_Y", "eps_x", "eps_zeta", "d", "max_iterations",
                 "terminal_covariance_mode", "tau_init_fraction", "accept_inaccurate",
                 "initial_resolution", "substeps"):
        assert getattr(a.config, name) == getattr(b.config, name), name


def preset_dict(name="earth-mars-2d"):
    return scenario_to_dict(load_preset(name))


def test_planar_preset_values():
    sc = load_preset("earth-mars-2d")
    assert sc.dim == 2 and sc.N == 40 and sc.mass_stochastic
    np.testing.assert_array_equal(sc.x_i, [-140699693, -51614428, 9.774596, -28.07828, 5000.0])
    np.testing.assert_array_equal(sc.x_f[:4], [-172682023, 176959469, -16.427384, -14.860506])
    assert np.isnan(sc.x_f[-1])
    assert sc.params.u_max == 5 * NEWTON == 5e-3
    assert sc.t_f == 348.795 * DAY
    assert sc.params.gamma == 9e-5
    assert sc.params.mu == 1.3271e11 and sc.params.isp == 3000.0
    np.testing.assert_allclose(sc.params.g0, 9.80665e-3, rtol=1e-15)
    np.testing.assert_allclose(np.diag(sc.P_i), [100, 100, 0.01, 0.01, 0.0], rtol=1e-15)
    np.testing.assert_allclose(np.diag(sc.P_f), [3.16e5**2, 3.16e5**2, 0.01, 0.01, 70.7107**2], rtol=1e-15)
    np.testing.assert_allclose(sc.P_f[-1, -1], 5000.0, atol=5e-3)
    assert sc.config.d == 100 and sc.config.eps_Y == 0.01
    assert sc.config.p == 0.95 and sc.config.beta_u == 0.95


def test_spatial_presets():
    sc = load_preset("earth-mars-3d")
    assert sc.dim == 3 and sc.N == 60
    np.testing.assert_array_equal(sc.x_i, [-140699693, -51614428, 980, 9.774596, -28.07828, 4.337725e-4, 5000.0])
    np.testing.assert_array_equal(sc.x_f[:6], [-172682023, 176959469, 7948912, -16.427384, -14.860506,
                                               9.21486e-2])
    assert sc.params.g0 == 9.80665e-3
    assert sc.params.u_max == 5e-3 and sc.params.gamma == 9e-5 and sc.t_f == 348.795 * DAY
    np.testing.assert_allclose(np.sqrt(sc.terminal_mass_variance), 70.71, atol=5e-3)
    variant = load_preset("earth-mars-3d-mass40")
    assert variant.terminal_mass_variance == 1600.0
    assert np.sqrt(variant.terminal_mass_variance) == 40.0
    np.testing.assert_array_equal(variant.P_f[:-1, :-1], sc.P_f[:-1, :-1])
    np.testing.assert_array_equal(variant.x_i, sc.x_i)


def test_unknown_preset():
    with pytest.raises(ScenarioError, match="unknown preset"):
        load_preset("earth-venus")


@pytest.mark.parametrize("name", ["earth-mars-2d", "earth-mars-3d", "earth-mars-3d-mass40"])
def test_preset_round_trip(tmp_path, name):
    sc = load_preset(name)
    write_scenario(tmp_path / "s.yaml", sc)
    assert_same_scenario(parse_scenario(tmp_path / "s.yaml"), sc)


def _spd(rng, n):
    A = rng.standard_normal((n, n))
    return A @ A.T + 0.1 * np.eye(n)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), dim=st.sampled_from([2, 3]), full=st.booleans(),
       N=st.integers(2, 80), stochastic=st.booleans(), mode=st.sampled_from(["upper-bound", "equality"]))
def test_round_trip_identity(tmp_path_factory, seed, dim, full, N, stochastic, mode):
    rng = np.random.default_rng(seed)
    n = 2 * dim + 1
    base = load_preset("earth-mars-3d" if dim == 3 else "earth-mars-2d")
    x_i = base.x_i * rng.uniform(0.5, 2.0, n)
    x_f = base.x_f * rng.uniform(0.5, 2.0, n)
    P_i = _spd(rng, n) if full else np.diag(rng.uniform(0.0, 10.0, n))
    P_f = _spd(rng, n) * 1e3 if full else np.diag(rng.uniform(0.0, 1e6, n))
    params = PhysicalParams(mu=rng.uniform(1e5, 2e11), isp=rng.uniform(100, 5000), g0=rng.uniform(1e-3, 2e-2),
                            u_max=rng.uniform(1e-4, 1.0), gamma=rng.uniform(0.0, 1e-3))
    config = type(base.config)(eps_x=float(rng.uniform(1e-5, 1e-2)), d=float(rng.uniform(1, 1e3)),
                               max_iterations=int(rng.integers(1, 50)), terminal_covariance_mode=mode)
    sc = base.replace(name=f"case{seed}", x_i=x_i, x_f=x_f, P_i=P_i, P_f=P_f, params=params,
                      t_f=float(rng.uniform(1.0, 1e8)), N=N, config=config, mass_stochastic=stochastic)
    path = tmp_path_factory.mktemp("rt") / "s.yaml"
    write_scenario(path, sc)
    assert_same_scenario(parse_scenario(path), sc)


def test_sigma_fields_are_squared():
    data = preset_dict()
    for key in ("var_r", "var_v", "var_m"):
        del data["initial"][key]
    data["initial"]["sigma_r"] = {"value": 10000.0, "unit": "m"}
    data["initial"]["sigma_v"] = {"value": [100.0, 200.0], "unit": "m/s"}
    data["initial"]["sigma_m"] = {"value": 3.0, "unit": "kg"}
    sc = scenario_from_dict(data)
    np.testing.assert_allclose(np.diag(sc.P_i), [100.0, 100.0, 0.01, 0.04, 9.0], rtol=1e-14)


def test_unit_conversions_at_ingest():
    data = preset_dict()
    data["t_f"] = {"value": 2.0, "unit": "day"}
    data["physical"]["g0"] = {"value": 9.80665, "unit": "m/s^2"}
    data["physical"]["u_max"] = {"value": 5.0, "unit": "N"}
    data["initial"]["r"] = {"value": [1.0, 0.0], "unit": "AU"}
    sc = scenario_from_dict(data)
    assert sc.t_f == 2 * 86400.0
    np.testing.assert_allclose(sc.params.g0, 9.80665e-3, rtol=1e-15)
    np.testing.assert_allclose(sc.params.u_max, 5e-3, rtol=1e-15)
    assert sc.x_i[0] == 1.495978707e8


@pytest.mark.parametrize("edit, path", [
    (lambda d: d["initial"].pop("r"), "initial.r"),
    (lambda d: d["physical"].pop("gamma"), "physical.gamma"),
    (lambda d: d.pop("N"), "N"),
    (lambda d: d["final"].pop("var_m"), "final.var_m"),
])
def test_missing_field_names_its_path(edit, path):
    data = preset_dict()
    edit(data)
    with pytest.raises(ScenarioError, match="missing field") as info:
        scenario_from_dict(data)
    assert info.value.path == path
    assert str(info.value).startswith(path)


@pytest.mark.parametrize("edit, path, message", [
    (lambda d: d["initial"].__setitem__("r", {"value": [1.0, 2.0], "unit": "km/s"}), "initial.r", "expected a length"),
    (lambda d: d["physical"].__setitem__("u_max", {"value": 5.0, "unit": "kg"}), "physical.u_max", "expected a force"),
    (lambda d: d.__setitem__("t_f", {"value": 3.0, "unit": "fortnight"}), "t_f", "unknown unit"),
    (lambda d: d["final"].__setitem__("var_r", {"value": 1.0, "unit": "km"}), "final.var_r", r"expected a length\^2"),
    (lambda d: d["initial"].__setitem__("v", {"value": [1.0, 2.0, 3.0], "unit": "km/s"}), "initial.v", "shape"),
])
def test_unit_and_shape_errors_name_their_path(edit, path, message):
    data = preset_dict()
    edit(data)
    with pytest.raises(ScenarioError, match=message) as info:
        scenario_from_dict(data)
    assert info.value.path == path


def test_covariance_must_be_psd():
    data = preset_dict()
    P = np.diag([100.0, 100.0, 0.01, 0.01, 0.0])
    P[0, 1] = P[1, 0] = 200.0
    data["initial"] = {k: v for k, v in data["initial"].items() if not k.startswith("var_")}
    data["initial"]["covariance"] = {"value": P.tolist(), "units": ["km", "km", "km/s", "km/s", "kg"]}
    with pytest.raises(ScenarioError, match="positive semidefinite") as info:
        scenario_from_dict(data)
    assert info.value.path == "initial"
    data["final"]["var_v"] = {"value": -1.0, "unit": "km^2/s^2"}
    data["initial"]["covariance"]["value"] = np.diag([1.0, 1, 1, 1, 0]).tolist()
    with pytest.raises(ScenarioError, match="nonnegative") as info:
        scenario_from_dict(data)
    assert info.value.path == "final.var_v"


def test_full_covariance_units_scale_both_sides():
    data = preset_dict()
    data["initial"] = {k: v for k, v in data["initial"].items() if not k.startswith("var_")}
    P = np.diag([1e6, 1e6, 1e4, 1e4, 4.0])
    P[0, 2] = P[2, 0] = 1e3
    data["initial"]["covariance"] = {"value": P.tolist(), "units": ["m", "m", "m/s", "m/s", "kg"]}
    sc = scenario_from_dict(data)
    np.testing.assert_allclose(sc.P_i[0, 0], 1.0, rtol=1e-14)
    np.testing.assert_allclose(sc.P_i[2, 2], 1e-2, rtol=1e-14)
    np.testing.assert_allclose(sc.P_i[0, 2], 1e-3, rtol=1e-14)
    assert sc.P_i[4, 4] == 4.0


def test_other_validation_errors():
    data = preset_dict()
    data["solver"]["warp_factor"] = 9
    with pytest.raises(ScenarioError, match="unknown solver setting") as info:
        scenario_from_dict(data)
    assert info.value.path == "solver.warp_factor"
    data = preset_dict()
    data["dimension"] = "4D"
    with pytest.raises(ScenarioError, match="2D"):
        scenario_from_dict(data)
    data = preset_dict()
    data["N"] = 1
    with pytest.raises(ScenarioError, match="N"):
        scenario_from_dict(data)
    data = preset_dict()
    data["t_f"] = {"value": -1.0, "unit": "s"}
    with pytest.raises(ScenarioError, match="t_f"):
        scenario_from_dict(data)
    data = preset_dict()
    data["initial"]["m"] = {"value": 0.0, "unit": "kg"}
    with pytest.raises(ScenarioError, match="initial.m"):
        scenario_from_dict(data)


def test_invalid_yaml_is_a_scenario_error(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("initial: [unclosed\n")
    with pytest.raises(ScenarioError, match="not valid YAML"):
        parse_scenario(path)


def _radii(poly, center):
    return np.linalg.norm(poly - center, axis=-1)


def test_unit_covariance_ellipse_is_circle():
    radius = np.sqrt(stats.chi2.ppf(0.95, 2))
    # closed form of the two-dof quantile
    np.testing.assert_allclose(radius, np.sqrt(-2.0 * np.log(0.05)), rtol=1e-14)
    np.testing.assert_allclose(radius, 2.4477, atol=5e-5)
    poly = emit_ellipses(np.eye(2)[None], np.array([[3.0, -1.0]]), 0.95)
    assert poly.shape == (1, 64, 2)
    np.testing.assert_allclose(_radii(poly[0], [3.0, -1.0]), radius, rtol=1e-13)


def test_scale_factor_is_exact():
    rng = np.random.default_rng(3)
    S = np.stack([_spd(rng, 2) for _ in range(5)])
    m = rng.standard_normal((5, 2)) * 1e8
    base = emit_ellipses(S, m, 0.95, 1.0)
    big = emit_ellipses(S, m, 0.95, 10.0)
    np.testing.assert_allclose(big - m[:, None], 10.0 * (base - m[:, None]), rtol=1e-12, atol=1e-6)


def test_diagonal_covariance_semi_axes():
    poly = emit_ellipses(np.diag([4.0, 1.0])[None], np.zeros((1, 2)), 0.95, n_points=64)[0]
    radius = np.sqrt(stats.chi2.ppf(0.95, 2))
    np.testing.assert_allclose(np.max(np.abs(poly[:, 0])), 2.0 * radius, rtol=1e-12)
    np.testing.assert_allclose(np.max(np.abs(poly[:, 1])), radius, rtol=1e-12)
    # every vertex on the level set
    q = poly[:, 0] ** 2 / 4.0 + poly[:, 1] ** 2
    np.testing.assert_allclose(q, radius**2, rtol=1e-12)


def test_singular_block_raises():
    with pytest.raises(EllipseError, match="singular"):
        emit_ellipses(np.array([[[1.0, 1.0], [1.0, 1.0]]]), np.zeros((1, 2)))
    with pytest.raises(EllipseError):
        emit_ellipses(np.eye(3)[None], np.zeros((1, 3)))


def test_ellipse_table_round_trip(tmp_path):
    poly = emit_ellipses(np.array([np.eye(2), np.diag([2.0, 0.5])]), np.array([[1e8, 2e8], [0.0, 1.0]]))
    write_ellipses(tmp_path / "e.tsv", poly, nodes=[3, 7])
    cols, units, data = read_table(tmp_path / "e.tsv")
    assert cols == ["node", "vertex", "x", "y"] and units == ["1", "1", "km", "km"]
    np.testing.assert_array_equal(data[:, 2:].reshape(poly.shape), poly)
    np.testing.assert_array_equal(np.unique(data[:, 0]), [3, 7])


@settings(max_examples=25, deadline=None)
@given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=6, max_size=6))
def test_table_round_trip_is_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("tab") / "t.tsv"
    rows = np.array(values).reshape(2, 3)
    write_table(path, ["a", "b", "c"], ["km", "kg", "1"], rows, title="t")
    cols, units, data = read_table(path)
    assert cols == ["a", "b", "c"] and units == ["km", "kg", "1"]
    np.testing.assert_array_equal(data, rows)


def test_table_format_errors(tmp_path):
    with pytest.raises(ValueError):
        write_table(tmp_path / "x.tsv", ["a", "b"], ["km"], [[1.0, 2.0]])
    path = tmp_path / "bad.tsv"
    path.write_text("a\tb\n1\t2\n")
    with pytest.raises(TableFormatError, match="units"):
        read_table(path)
    path.write_text("# units km km\na\tb\n1\t2\t3\n")
    with pytest.raises(TableFormatError, match="3"):
        read_table(path)


def test_tril_packing_round_trip():
    rng = np.random.default_rng(0)
    M = np.stack([_spd(rng, 5) for _ in range(4)])
    np.testing.assert_array_equal(from_tril(tril_values(M), 5), M)
    assert tril_values(M).shape == (4, 15)


def _run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_cli_census(capsys):
    code, out, _ = _run(capsys, "census", "--preset", "earth-mars-2d")
    assert code == 0
    table = dict(line.split("\t") for line in out.strip().splitlines())
    assert table["variables"] == "1580"
    assert table["equality_rows"] == "830"


def test_cli_errors_are_categorized(tmp_path, capsys):
    code, _, err = _run(capsys, "census", "--scenario", str(tmp_path / "missing.yaml"))
    assert code == EXIT_CODES["io"] == 8
    assert json.loads(err.strip().splitlines()[-1])["error"] == "io"
    data = preset_dict()
    del data["physical"]["mu"]
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(data))
    code, _, err = _run(capsys, "census", "--scenario", str(bad))
    assert code == EXIT_CODES["scenario"] == 3
    record = json.loads(err.strip().splitlines()[-1])
    assert record["error"] == "scenario" and record["message"].startswith("physical.mu")
    code, _, err = _run(capsys, "simulate", "--run", str(tmp_path / "nowhere"))
    assert code == EXIT_CODES["io"]
    code, _, err = _run(capsys, "census", "--preset", "earth-mars-2d", "--max-iters", "0")
    assert code == EXIT_CODES["scenario"]


def test_cli_overrides_reach_the_census(capsys):
    _, on, _ = _run(capsys, "census", "--preset", "earth-mars-2d")
    _, off, _ = _run(capsys, "census", "--preset", "earth-mars-2d", "--mass-stochastic", "off")
    parse = lambda text: dict(line.split("\t") for line in text.strip().splitlines())
    assert int(parse(off)["variables"]) < int(parse(on)["variables"])


@pytest.fixture(scope="module")
def solved_run(tmp_path_factory, small_scenario, small_reference):
    root = tmp_path_factory.mktemp("cli")
    write_scenario(root / "small.yaml", small_scenario)
    write_reference(root / "ref.txt", small_reference)
    code = main(["solve", "--scenario", str(root / "small.yaml"), "--reference", str(root / "ref.txt"),
                 "--out", str(root / "run")])
    assert code == 0
    return root


def test_cli_solve_writes_artifacts(solved_run, small_solution):
    run = solved_run / "run"
    for name in ("nodes.tsv", "controls.tsv", "gains.tsv", "iterations.log", "scenario.yaml", "manifest.json",
                 "reference.txt", "ellipses_position.tsv", "trajectory.svg", "mass.svg", "thrust.svg"):
        assert (run / name).is_file(), name
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["command"] == "solve"
    np.testing.assert_allclose(manifest["metrics"]["final_mass_kg"], small_solution.means()[-1, -1], rtol=1e-8)
    assert manifest["certification"]["covariance_residual"] <= 1e-7
    log = (run / "iterations.log").read_text().strip().splitlines()
    assert len(log) >= 2
    cols, units, data = read_table(run / "nodes.tsv")
    assert len(units) == len(cols) and data.shape[0] == small_solution.N + 1
    n = 5
    P = from_tril(data[:, -n * (n + 1) // 2:], n)
    for Pk in P:
        np.testing.assert_array_equal(Pk, Pk.T)
        assert np.linalg.eigvalsh(Pk).min() >= -1e-9 * max(1.0, np.abs(Pk).max())


def test_cli_simulate_is_deterministic(solved_run, capsys):
    run = solved_run / "run"
    outs = []
    for tag in ("a", "b"):
        code = main(["simulate", "--run", str(run), "--out", str(solved_run / tag), "--samples", "1000",
                     "--seed", "7", "--no-figures"])
        assert code == 0
        outs.append((solved_run / tag / "ensemble.tsv").read_bytes())
    assert outs[0] == outs[1]
    capsys.readouterr()
    summary = json.loads((solved_run / "a" / "simulation.json").read_text())
    assert summary["samples"] == 1000 and summary["seed"] == 7
    cols, units, _ = read_table(solved_run / "a" / "ensemble.tsv")
    assert len(cols) == len(units)


def test_cli_reference_writes_nominal(tmp_path, capsys):
    sc = small_transfer(days=120.0, N=10, mass=1000.0, thrust_N=1.0)
    write_scenario(tmp_path / "s.yaml", sc)
    code, out, _ = _run(capsys, "reference", "--scenario", str(tmp_path / "s.yaml"), "--out", str(tmp_path / "o"))
    assert code == 0
    value = float(out.strip().split("\t")[-1])
    assert 0 < value < 1000.0
    assert (tmp_path / "o" / "reference.txt").is_file()
