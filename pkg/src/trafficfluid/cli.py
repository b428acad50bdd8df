"""Command-line front end.

    trafficfluid run-micro --scenario fig1_prcc_viscous --out out/
    trafficfluid run-macro --scenario macro_bump --out out/
    trafficfluid compare   --scenario compare_bump --out out/
    trafficfluid validate  --scenario my_scenario.yaml

``--scenario`` takes a file path or the name of a bundled scenario. Exit codes:
0 success, 2 invalid scenario, 3 a guard or constraint failure during the run.

Every output file starts with the resolved parameter set: CSV files as ``#``
comment lines holding one JSON document, JSON files under ``"metadata"``.
Outputs are byte-identical across reruns; wall-clock time goes to the separate
``timing.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .fleet import pair_geometry
from .macro import (CflError, ConstraintError, from_transformed, micro_macro_compare, pde_step,
                    stable_dt, to_transformed, transformed_pde_step)
from .microsim import SimulationError, Trajectory, simulate
from .scenario import (CompareScenario, MacroScenario, MicroScenario, ScenarioError,
                       bundled_names, load_scenario)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_GUARD = 3

log = logging.getLogger("trafficfluid")


def fmt(x) -> str:
    """17 significant digits: exact round trip for 64-bit floats."""
    return format(float(x), ".17g")


def _metadata(scen, command: str, seed) -> dict:
    return {"program": "trafficfluid", "version": __version__, "command": command,
            "seed_override": seed, "scenario": scen.resolved}


def _write_csv(path: Path, meta: dict, header: list[str], rows) -> None:
    lines = ["# " + line for line in json.dumps(meta, indent=1, sort_keys=True).splitlines()]
    lines.append(",".join(header))
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    path.write_text("\n".join(lines) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def _write_timing(out: Path, command: str, seconds: float) -> None:
    _write_json(out / "timing.json", {"command": command, "wall_time_s": seconds})


# -- run-micro ---------------------------------------------------------------------

def _micro_outputs(scen: MicroScenario, traj: Trajectory, out: Path, meta: dict) -> dict:
    n = traj.n
    header = ["t"]
    for i in range(1, n + 1):
        header += [f"x_{i}", f"y_{i}", f"theta_{i}", f"v_{i}", f"u_{i}", f"F_{i}"]
    rows = []
    for k, t in enumerate(traj.times):
        w = traj.states[k]
        row = [t]
        for i in range(n):
            row += [w[i], w[n + i], w[2 * n + i], w[3 * n + i], traj.u[k, i], traj.F[k, i]]
        rows.append(row)
    _write_csv(out / "trajectory.csv", meta, header, rows)

    if traj.H_R is not None:
        eh = ["t", "H", "H_R", traj.dissipation_name]
        erows = zip(traj.times, traj.H, traj.H_R, traj.dissipation)
    else:
        eh = ["t", "H", traj.dissipation_name]
        erows = zip(traj.times, traj.H, traj.dissipation)
    _write_csv(out / "energy.csv", meta, eh, erows)

    if len(traj.times) == 0:
        return {}
    last = traj.state(len(traj.times) - 1)
    clf = traj.clf
    steps = np.diff(clf)
    tol = 1e-8 * max(1.0, float(clf[0]))
    min_sep = None
    if n > 1:
        min_sep = min(float(np.min(pair_geometry(traj.state(k), scen.pairs)[2] - scen.pairs.L))
                      for k in range(len(traj.times)))
    return {
        "samples": len(traj.times),
        "t_final": float(traj.times[-1]),
        "clf_name": "H_R" if traj.H_R is not None else "H",
        "clf_initial": float(clf[0]),
        "clf_final": float(clf[-1]),
        "clf_non_increasing": bool(np.all(steps <= tol)) if steps.size else True,
        "final_max_abs_speed_error": float(np.max(np.abs(last.v - scen.road.v_star))),
        "final_max_abs_heading": float(np.max(np.abs(last.theta))),
        "final_max_abs_F": float(np.max(np.abs(traj.F[-1]))),
        "final_max_abs_u": float(np.max(np.abs(traj.u[-1]))),
        "min_separation_margin": min_sep,
    }


def run_micro(scen: MicroScenario, out: Path, meta: dict) -> int:
    status, err_event = EXIT_OK, None
    try:
        traj = simulate(scen.loop, scen.initial, scen.integrator)
    except SimulationError as exc:
        status, err_event = EXIT_GUARD, exc.event
        traj = exc.trajectory
        log.error("guard failure: %s", exc)
    summary = {"metadata": meta, "status": "ok" if status == EXIT_OK else "guard-exhausted"}
    if traj is not None:
        summary["results"] = _micro_outputs(scen, traj, out, meta)
        summary["guard_events"] = [e.as_dict() for e in traj.events]
    else:
        summary["guard_events"] = [err_event.as_dict()]
    if err_event is not None:
        summary["failure"] = err_event.as_dict()
    _write_json(out / "summary.json", summary)
    return status


# -- run-macro ---------------------------------------------------------------------

def run_macro(scen: MacroScenario, out: Path, meta: dict) -> int:
    fld0 = scen.field
    params, fam = scen.params, scen.family
    marks = sorted(set(scen.snapshots) | {scen.t_end})
    snaps, t, cur, steps = {}, 0.0, fld0, 0
    status, failure = EXIT_OK, None
    try:
        for mark in marks:
            while t < mark - 1e-12:
                dt = scen.dt if scen.dt is not None else stable_dt(cur, params, fam)
                dt = min(dt, mark - t)
                if scen.form == "transformed":
                    cur = from_transformed(transformed_pde_step(to_transformed(cur, params), params, dt),
                                           params)
                else:
                    cur = pde_step(cur, params, dt, fam)
                t += dt
                steps += 1
            snaps[mark] = cur.copy()
    except (CflError, ConstraintError) as exc:
        status = EXIT_GUARD
        failure = {"time": t, "message": str(exc), "cell": getattr(exc, "cell", None)}
        log.error("macro run stopped: %s", exc)

    xs = fld0.grid.centers
    snap_info = []
    for k, mark in enumerate(sorted(snaps)):
        s = snaps[mark]
        name = f"snapshot_{k:03d}.csv"
        _write_csv(out / name, {**meta, "time": mark}, ["x", "rho", "v"], zip(xs, s.rho, s.v))
        snap_info.append({"file": name, "time": mark, "mass": s.mass(),
                          "max_abs_rho_change": float(np.max(np.abs(s.rho - fld0.rho))),
                          "max_abs_v_change": float(np.max(np.abs(s.v - fld0.v)))})
    m0 = fld0.mass()
    m1 = cur.mass()
    summary = {"metadata": meta, "status": "ok" if status == EXIT_OK else "constraint-failure",
               "steps": steps, "t_final": t, "mass_initial": m0, "mass_final": m1,
               "relative_mass_drift": abs(m1 - m0) / m0, "snapshots": snap_info}
    if failure is not None:
        summary["failure"] = failure
    _write_json(out / "summary.json", summary)
    return status


# -- compare -------------------------------------------------------------------------

def run_compare(scen: CompareScenario, out: Path, meta: dict) -> int:
    try:
        rows = micro_macro_compare(scen.n_list, scen.longitudinal, scen.mass, scen.family,
                                   scen.profile, times=scen.times, cells=scen.cells,
                                   micro_dt=scen.micro_dt)
    except SimulationError as exc:
        log.error("particle run failed: %s", exc)
        _write_json(out / "summary.json", {"metadata": meta, "status": "guard-exhausted",
                                           "failure": exc.event.as_dict()})
        return EXIT_GUARD
    except (CflError, ConstraintError) as exc:
        log.error("continuum run failed: %s", exc)
        _write_json(out / "summary.json", {"metadata": meta, "status": "constraint-failure",
                                           "failure": {"message": str(exc)}})
        return EXIT_GUARD
    table = [r.as_dict() for r in rows]
    trend = {}
    for t in scen.times:
        errs = [r.l2_rho for r in rows if r.time == t]
        trend[fmt(t)] = bool(all(b <= a for a, b in zip(errs, errs[1:])))
    _write_json(out / "errors.json", {"metadata": meta, "errors": table})
    _write_json(out / "summary.json", {"metadata": meta, "status": "ok", "errors": table,
                                       "l2_rho_non_increasing": trend})
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trafficfluid",
                                     description="Lane-free cruise control simulations and their "
                                                 "continuum traffic-fluid models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"run-micro": "integrate a fleet scenario", "run-macro": "step a continuum scenario",
             "compare": "particle versus continuum error sweep",
             "validate": "check a scenario file without running it"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--scenario", required=True,
                       help="scenario file, or one of: " + ", ".join(bundled_names()))
        p.add_argument("--seed", type=int, default=None,
                       help="override the initial-state generator seed")
        p.add_argument("--quiet", action="store_true", help="only report errors")
        if name != "validate":
            p.add_argument("--out", default="out", help="output directory (default: out)")
    return parser


_EXPECTED = {"run-micro": MicroScenario, "run-macro": MacroScenario, "compare": CompareScenario}
_RUNNERS = {"run-micro": run_micro, "run-macro": run_macro, "compare": run_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    if args.seed is not None and args.seed < 0:
        log.error("--seed must be non-negative")
        return EXIT_INVALID
    try:
        scen = load_scenario(args.scenario, seed=args.seed)
    except ScenarioError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    if args.command == "validate":
        log.info("%s: valid %s scenario", args.scenario, scen.resolved["kind"])
        return EXIT_OK
    expected = _EXPECTED[args.command]
    if not isinstance(scen, expected):
        log.error("%s: '%s' needs a %s scenario, got kind '%s'", args.scenario, args.command,
                  expected.__name__.replace("Scenario", "").lower(), scen.resolved["kind"])
        return EXIT_INVALID

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = _metadata(scen, args.command, args.seed)
    t0 = time.perf_counter()
    status = _RUNNERS[args.command](scen, out, meta)
    _write_timing(out, args.command, time.perf_counter() - t0)
    if status == EXIT_OK:
        log.info("%s finished; outputs in %s", args.command, out)
    return status


if __name__ == "__main__":
    sys.exit(main())
