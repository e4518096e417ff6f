"""Command-line entry point: ``covsteer <subcommand> [options]``.

Subcommands:
    reference     compute and save the deterministic nominal
    solve         run the covariance-steering SCP and write all tables
    simulate      Monte Carlo of a solved run directory
    compare-mass  solve with stochastic and with deterministic mass
    census        print subproblem variable and constraint counts

Failures print one JSON line ``{"error": <category>, "message": ...}`` on
stderr and exit with the category's code (see :data:`EXIT_CODES`).  Log
verbosity follows the ``COVSTEER_LOG`` environment variable (default WARNING).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time

import numpy as np

from covsteer import __version__
from covsteer.conic import ProgramError
from covsteer.discretize import DiscretizationError
from covsteer.dynamics import NEWTON, DynamicsError
from covsteer.montecarlo import (EULER, RK4_DRIFT, SimulationError, coverage_check, ensemble_stats,
                                  simulate_closed_loop, write_ensemble_summary, write_samples)
from covsteer.reference import (ReferenceFormatError, ReferenceSolveError, load_reference, solve_reference,
                                write_reference)
from covsteer.report import (COMPARE_COLUMNS, COMPARE_UNITS, EllipseError, comparison_rows, emit_ellipses,
                             read_covariances, read_policy, solution_metrics, write_ellipses,
                             write_solution_tables)
from covsteer.scenario import PRESETS, ScenarioError, load_preset, parse_scenario, write_scenario
from covsteer.steering import ConvergenceError, SteeringError, SubproblemError, census, certify, scp_solve
from covsteer.tables import TableFormatError, atomic_write, write_manifest, write_table

log = logging.getLogger("covsteer")

EXIT_CODES = {
    "scenario": 3,
    "reference": 4,
    "subproblem": 5,
    "not-converged": 6,
    "simulation": 7,
    "io": 8,
    "internal": 1,
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _add_scenario_args(p):
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--scenario", help="scenario YAML file")
    g.add_argument("--preset", choices=PRESETS, help="bundled scenario")
    p.add_argument("--mass-stochastic", choices=("on", "off"), help="override the scenario flag")
    p.add_argument("--terminal-cov", choices=("upper-bound", "equality"), help="terminal covariance mode")
    p.add_argument("--max-iters", type=int, help="SCP iteration limit")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="covsteer", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"covsteer {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reference", help="compute the deterministic nominal")
    _add_scenario_args(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("solve", help="run the covariance-steering SCP")
    _add_scenario_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--reference", help="reference file to start from (computed if omitted)")
    p.add_argument("--no-figures", action="store_true", help="skip figure rendering")

    p = sub.add_parser("simulate", help="Monte Carlo of a solved run directory")
    p.add_argument("--run", required=True, help="directory written by 'solve'")
    p.add_argument("--out", help="output directory (default: the run directory)")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--substeps", type=int, default=20)
    p.add_argument("--scheme", choices=(RK4_DRIFT, EULER), default=RK4_DRIFT)
    p.add_argument("--no-clip", action="store_true", help="do not saturate the thrust at u_max")
    p.add_argument("--confidence", type=float, default=0.95)
    p.add_argument("--dump-samples", action="store_true", help="also write every sample's node states")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("compare-mass", help="stochastic versus deterministic mass")
    _add_scenario_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--reference", help="reference file shared by both legs")
    p.add_argument("--samples", type=int, default=0, help="Monte Carlo samples per leg (0 to skip)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("census", help="print subproblem sizes")
    _add_scenario_args(p)
    return parser


def load_scenario(args):
    sc = load_preset(args.preset) if args.preset else parse_scenario(args.scenario)
    config = sc.config
    if args.terminal_cov:
        config = dataclasses.replace(config, terminal_covariance_mode=args.terminal_cov)
    if args.max_iters is not None:
        if args.max_iters < 1:
            raise ScenarioError("--max-iters", "must be at least 1")
        config = dataclasses.replace(config, max_iterations=args.max_iters)
    changes = {"config": config}
    if args.mass_stochastic:
        changes["mass_stochastic"] = args.mass_stochastic == "on"
    return sc.replace(**changes)


def _config_record(config) -> dict:
    skip = {"w_schedule", "solver"}
    return {f.name: getattr(config, f.name) for f in dataclasses.fields(config) if f.name not in skip}


def _obtain_reference(sc, path):
    if path:
        ref = load_reference(path)
        if ref.N != sc.N:
            raise CliError("reference", f"reference has {ref.N} segments, scenario has {sc.N}")
        return ref
    return solve_reference(sc)


def cmd_reference(args):
    sc = load_scenario(args)
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    ref = solve_reference(sc)
    write_reference(f"{args.out}/reference.txt", ref)
    write_scenario(f"{args.out}/scenario.yaml", sc)
    write_manifest(f"{args.out}/manifest.json", {
        "command": "reference", "version": __version__, "scenario": sc.name,
        "final_mass_kg": float(ref.states[-1, -1]),
        "peak_thrust_N": float(np.linalg.norm(ref.controls, axis=1).max() / NEWTON),
        "seconds": time.perf_counter() - t0,
    })
    print(f"reference\tfinal_mass_kg\t{float(ref.states[-1, -1])!r}")
    return 0


def _solve_into(sc, ref, out, figures: bool):
    """Solve, write every artifact into ``out`` and return ``(solution, metrics, error)``."""
    os.makedirs(out, exist_ok=True)
    lines = []

    def sink(line):
        lines.append(line)
        print(line, flush=True)

    t0 = time.perf_counter()
    error = None
    try:
        sol = scp_solve(sc, ref, log_sink=sink)
    except ConvergenceError as exc:
        sol, error = exc.solution, exc
    except SubproblemError as exc:
        _write_log(out, lines)
        raise CliError("subproblem", str(exc)) from None
    seconds = time.perf_counter() - t0
    _write_log(out, lines)
    write_reference(f"{out}/reference.txt", ref)
    write_scenario(f"{out}/scenario.yaml", sc)
    write_solution_tables(out, sol)
    metrics = solution_metrics(sol)
    cert = certify(sol)
    d = sc.dim
    P = sol.covariances()
    lam = np.linalg.eigvalsh(P[:, :2, :2])
    ok = lam[:, 0] > 1e-12 * lam[:, 1]
    if np.any(ok):
        write_ellipses(f"{out}/ellipses_position.tsv",
                       emit_ellipses(P[ok][:, :2, :2], sol.means()[ok][:, :2], 0.95, 1.0),
                       nodes=np.flatnonzero(ok))
    if figures:
        from covsteer import plotting
        plotting.plot_trajectory(f"{out}/trajectory.svg", sol.times(), sol.means(), P)
        plotting.plot_mass(f"{out}/mass.svg", sol.times(), sol.means()[:, -1], np.sqrt(np.clip(P[:, -1, -1], 0, None)))
        plotting.plot_thrust(f"{out}/thrust.svg", sol.times(), sol.feedforward(), sc.params.u_max)
    write_manifest(f"{out}/manifest.json", {
        "command": "solve", "version": __version__, "scenario": sc.name,
        "mass_stochastic": sc.mass_stochastic, "config": _config_record(sol.config),
        "seconds": seconds, "metrics": metrics, "certification": cert,
        "history": [{k: v for k, v in h.items()} for h in sol.history],
    })
    return sol, metrics, error


def _write_log(out, lines):
    atomic_write(f"{out}/iterations.log", "\n".join(lines) + "\n")


def cmd_solve(args):
    sc = load_scenario(args)
    ref = _obtain_reference(sc, args.reference)
    sol, metrics, error = _solve_into(sc, ref, args.out, not args.no_figures)
    print(f"final_mass_kg\t{metrics['final_mass_kg']!r}")
    print(f"final_mass_std_kg\t{metrics['final_mass_std_kg']!r}")
    print(f"iterations\t{metrics['iterations']}")
    if error is not None:
        raise CliError("not-converged", f"no convergence within {sol.config.max_iterations} iterations")
    return 0


def cmd_simulate(args):
    run = args.run
    out = args.out or run
    os.makedirs(out, exist_ok=True)
    sc = parse_scenario(f"{run}/scenario.yaml")
    policy = read_policy(run)
    predicted = read_covariances(run)
    if args.samples < 2:
        raise CliError("simulation", "--samples must be at least 2")
    t0 = time.perf_counter()
    ens = simulate_closed_loop(policy, sc, args.samples, args.seed, substeps=args.substeps,
                               clip=not args.no_clip, scheme=args.scheme)
    d = sc.dim
    blocks = {"position": np.arange(d), "velocity": np.arange(d, 2 * d)}
    coverage = coverage_check(ens, predicted, args.confidence, blocks, means=policy.means)
    write_ensemble_summary(f"{out}/ensemble.tsv", ens, coverage)
    if args.dump_samples:
        write_samples(f"{out}/samples.tsv", ens)
    st = ensemble_stats(ens)
    sat = ens.control_satisfaction()
    summary = {
        "command": "simulate", "version": __version__, "scenario": sc.name, "seed": args.seed,
        "samples": args.samples, "substeps": args.substeps, "scheme": args.scheme, "clip": not args.no_clip,
        "flagged": ens.n_flagged, "clipped_total": int(ens.clip_counts.sum()),
        "terminal_inside_position": float(coverage["position"][-1]),
        "terminal_inside_velocity": float(coverage["velocity"][-1]),
        "min_thrust_ok_fraction": float(sat.min()),
        "final_mass_mean_kg": float(st.mass_mean[-1]), "final_mass_std_kg": float(st.mass_std[-1]),
        "seconds": time.perf_counter() - t0,
    }
    write_manifest(f"{out}/simulation.json", summary)
    if not args.no_figures:
        from covsteer import plotting
        plotting.plot_trajectory(f"{out}/trajectory_mc.svg", policy.times, policy.means, predicted, ensemble=ens)
        plotting.plot_mass(f"{out}/mass_mc.svg", policy.times, policy.means[:, -1],
                           np.sqrt(np.clip(predicted[:, -1, -1], 0, None)), ensemble=ens)
        plotting.plot_thrust(f"{out}/thrust_mc.svg", policy.times, policy.feedforward, sc.params.u_max, ensemble=ens)
    for key in ("terminal_inside_position", "terminal_inside_velocity", "min_thrust_ok_fraction",
                "final_mass_std_kg", "flagged"):
        print(f"{key}\t{float(summary[key])!r}")
    return 0


def cmd_compare_mass(args):
    base = load_scenario(args)
    ref = _obtain_reference(base, args.reference)
    os.makedirs(args.out, exist_ok=True)
    legs, sols = {}, {}
    for flag in (True, False):
        name = "stochastic" if flag else "deterministic"
        print(f"# {name} mass", flush=True)
        sol, metrics, error = _solve_into(base.replace(mass_stochastic=flag), ref, f"{args.out}/{name}",
                                          not args.no_figures)
        if error is not None:
            raise CliError("not-converged", f"{name}-mass leg did not converge")
        legs[name], sols[name] = metrics, sol
        if args.samples:
            ens = simulate_closed_loop(sol, base, args.samples, args.seed)
            write_ensemble_summary(f"{args.out}/{name}/ensemble.tsv", ens,
                                   coverage_check(ens, sol.covariances()))
    rows = comparison_rows(legs["stochastic"], legs["deterministic"])
    write_table(f"{args.out}/compare.tsv", COMPARE_COLUMNS, COMPARE_UNITS, rows,
                title="rows: stochastic mass, deterministic mass, ratio")
    trace_ratio, thrust_ratio = rows[2, 3], rows[2, 4]
    write_manifest(f"{args.out}/manifest.json", {
        "command": "compare-mass", "version": __version__, "scenario": base.name, "seed": args.seed,
        "legs": legs, "peak_position_trace_ratio": float(trace_ratio), "peak_thrust_ratio": float(thrust_ratio),
    })
    if not args.no_figures:
        from covsteer import plotting
        d = base.dim
        traces, thrusts = [], []
        for name in ("stochastic", "deterministic"):
            P = sols[name].covariances()
            traces.append(np.trace(P[:, :d, :d], axis1=1, axis2=2))
            thrusts.append(np.linalg.norm(sols[name].feedforward(), axis=1) / NEWTON)
        plotting.plot_comparison(f"{args.out}/compare.svg", sols["stochastic"].times(), traces, thrusts)
    print(f"peak_position_trace_ratio\t{float(trace_ratio)!r}")
    print(f"peak_thrust_ratio\t{float(thrust_ratio)!r}")
    return 0


def cmd_census(args):
    sc = load_scenario(args)
    for key, value in census(sc).items():
        print(f"{key}\t{value}")
    return 0


COMMANDS = {
    "reference": cmd_reference,
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "compare-mass": cmd_compare_mass,
    "census": cmd_census,
}


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ScenarioError):
        return "scenario"
    if isinstance(exc, (ReferenceSolveError, ReferenceFormatError)):
        return "reference"
    if isinstance(exc, SubproblemError):
        return "subproblem"
    if isinstance(exc, ConvergenceError):
        return "not-converged"
    if isinstance(exc, (SimulationError, EllipseError)):
        return "simulation"
    if isinstance(exc, (OSError, TableFormatError)):
        return "io"
    if isinstance(exc, (SteeringError, ProgramError, DiscretizationError, DynamicsError)):
        return "subproblem"
    return "internal"


def main(argv=None) -> int:
    level = os.environ.get("COVSTEER_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001
        category = _categorize(exc)
        if category == "internal":
            log.exception("unexpected failure")
        print(json.dumps({"error": category, "message": str(exc)}), file=sys.stderr)
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
