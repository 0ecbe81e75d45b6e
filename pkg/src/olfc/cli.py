"""Command-line front end.

Subcommands:

    olfc simulate <scenario.yaml> [-o DIR]
    olfc verify   <scenario.yaml> [--tolerances FILE] [-o DIR]
    olfc dispatch <scenario.yaml>
    olfc sweep    <scenario.yaml> --grid FILE [-j N] [-o DIR]

Exit codes: 0 success, 1 verification criteria failed, 2 configuration
error, 3 numeric abort.  The default output directory comes from the
OLFC_OUTPUT_DIR environment variable (falling back to ./olfc-out).
"""

import argparse
import copy
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import Thresholds, convergence_metrics
from .dispatch import optimal_dispatch
from .errors import NumericAbortError, OlfcError, ValidationError
from .scenario_io import load_scenario, scenario_from_dict, scenario_hash, scenario_to_dict
from .simulate import Trajectory, run_scenario

EXIT_OK = 0
EXIT_CRITERIA_FAILED = 1
EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ABORT = 3


def _fmt(x):
    return f"{x:.17g}"


def write_trajectory_csv(traj: Trajectory, path):
    """Stable schema: t,f_1..f_n,V_1..V_n,Pt_1..Pt_n,Pg_1..Pg_n,
    theta_1..theta_n,u_1..u_n,w_1..w_n,sigma_1..sigma_n with 17
    significant digits."""
    n = traj.n_areas
    cols = ["t"]
    for name in ("f", "V", "Pt", "Pg", "theta", "u", "w", "sigma"):
        cols += [f"{name}_{i + 1}" for i in range(n)]
    blocks = (traj.f, traj.V, traj.P_t, traj.P_g, traj.theta, traj.u, traj.w, traj.sigma)
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for k in range(traj.t.shape[0]):
            row = [_fmt(traj.t[k])]
            for b in blocks:
                row += [_fmt(v) for v in b[k]]
            fh.write(",".join(row) + "\n")


def write_plot_data(traj: Trajectory, path):
    """Long-format series for external plotting: frequency deviation,
    generated power, voltage, and control input panels."""
    panels = (("f", traj.f), ("P_t", traj.P_t), ("V", traj.V), ("u", traj.u))
    with open(path, "w") as fh:
        fh.write("t,series,area,value\n")
        for name, block in panels:
            for k in range(traj.t.shape[0]):
                for i in range(block.shape[1]):
                    fh.write(f"{_fmt(traj.t[k])},{name},{i + 1},{_fmt(block[k, i])}\n")


def write_manifest(out_dir: Path, scenario_path, scenario, artifacts):
    manifest = {
        "scenario": str(scenario_path),
        "output_dir": str(out_dir),
        "artifacts": sorted(artifacts),
        "tool_version": __version__,
        "config_hash": scenario_hash(scenario),
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def _default_outdir():
    return os.environ.get("OLFC_OUTPUT_DIR", "olfc-out")


def _load_thresholds(path):
    if path is None:
        return Thresholds()
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    valid = set(Thresholds.__dataclass_fields__)
    unknown = set(raw) - valid
    if unknown:
        raise ValidationError([_issue("tolerances.unknown-key", k) for k in sorted(unknown)])
    if "savings_band" in raw:
        raw["savings_band"] = tuple(raw["savings_band"])
    if "v_bounds" in raw:
        raw["v_bounds"] = tuple(raw["v_bounds"])
    return replace(Thresholds(), **raw)


def _issue(rule, key):
    from .errors import ValidationIssue
    return ValidationIssue(rule, key, "unknown tolerance name")


def cmd_simulate(args):
    scenario = load_scenario(args.scenario)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    traj = run_scenario(scenario)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_plot_data(traj, out / "plot_data.csv")
    write_manifest(out, args.scenario, scenario, ["trajectory.csv", "plot_data.csv", "manifest.json"])
    print(f"wrote {out / 'trajectory.csv'} ({traj.t.shape[0]} records)")
    return EXIT_OK


def cmd_verify(args):
    scenario = load_scenario(args.scenario)
    thresholds = _load_thresholds(args.tolerances)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    traj = run_scenario(scenario)
    disp = optimal_dispatch(scenario.final_demand(), scenario.controller.cost)
    report = convergence_metrics(traj, disp, thresholds)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_plot_data(traj, out / "plot_data.csv")
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    text = report.to_text()
    with open(out / "report.txt", "w") as fh:
        fh.write(text + "\n")
    write_manifest(out, args.scenario, scenario,
                   ["trajectory.csv", "plot_data.csv", "report.json", "report.txt", "manifest.json"])
    print(text)
    return EXIT_OK if report.passed else EXIT_CRITERIA_FAILED


def cmd_dispatch(args):
    scenario = load_scenario(args.scenario)
    demand = scenario.final_demand()
    disp = optimal_dispatch(demand, scenario.controller.cost)
    print("demand (p.u.):      " + "  ".join(_fmt(x) for x in demand))
    print("optimal P_t (p.u.): " + "  ".join(_fmt(x) for x in disp.P_t_opt))
    print(f"lambda_opt (currency/h per p.u.): {_fmt(disp.lambda_opt)}")
    if not disp.within_plausible_bounds:
        print("note: dispatch exceeds the plausibility bound of 1 p.u.")
    return EXIT_OK


def _apply_overrides(base_dict, overrides):
    d = copy.deepcopy(base_dict)
    for dotted, value in overrides.items():
        node = d
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node[int(p)] if isinstance(node, list) else node.setdefault(p, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
    return d


def _sweep_worker(payload):
    scenario_dict, run_dir = payload
    scenario = scenario_from_dict(scenario_dict, source=run_dir)
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj = run_scenario(scenario)
    write_trajectory_csv(traj, out / "trajectory.csv")
    write_manifest(out, "<sweep>", scenario, ["trajectory.csv", "manifest.json"])
    return {"run_dir": str(out), "config_hash": scenario_hash(scenario),
            "records": int(traj.t.shape[0])}


def cmd_sweep(args):
    scenario = load_scenario(args.scenario)
    base = scenario_to_dict(scenario)
    with open(args.grid) as fh:
        grid = yaml.safe_load(fh) or {}
    if not isinstance(grid, dict) or not grid:
        raise ValidationError(_issue("sweep.grid-empty", str(args.grid)))
    keys = sorted(grid)
    combos = list(itertools.product(*(grid[k] for k in keys)))
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    payloads = []
    for idx, combo in enumerate(combos):
        overrides = dict(zip(keys, combo))
        payloads.append((_apply_overrides(base, overrides), str(out / f"run_{idx:03d}")))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]
    sweep_manifest = {
        "scenario": str(args.scenario),
        "grid": {k: list(v) for k, v in grid.items()},
        "runs": results,
        "tool_version": __version__,
    }
    with open(out / "sweep_manifest.json", "w") as fh:
        json.dump(sweep_manifest, fh, indent=2, sort_keys=True)
    print(f"{len(results)} runs written under {out}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="olfc", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"olfc {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a scenario and write the trajectory CSV")
    sim.add_argument("scenario")
    sim.add_argument("-o", "--output", default=_default_outdir())
    sim.set_defaults(func=cmd_simulate)

    ver = sub.add_parser("verify", help="run a scenario and check the verification criteria")
    ver.add_argument("scenario")
    ver.add_argument("--tolerances", default=None, help="YAML file overriding threshold values")
    ver.add_argument("-o", "--output", default=_default_outdir())
    ver.set_defaults(func=cmd_verify)

    dis = sub.add_parser("dispatch", help="print the closed-form optimal dispatch")
    dis.add_argument("scenario")
    dis.set_defaults(func=cmd_dispatch)

    swp = sub.add_parser("sweep", help="run a parameter grid of scenarios in parallel")
    swp.add_argument("scenario")
    swp.add_argument("--grid", required=True, help="YAML mapping of dotted config paths to value lists")
    swp.add_argument("-j", "--jobs", type=int, default=1)
    swp.add_argument("-o", "--output", default=_default_outdir())
    swp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"configuration error:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except NumericAbortError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC_ABORT
    except (OSError, yaml.YAMLError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except OlfcError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
