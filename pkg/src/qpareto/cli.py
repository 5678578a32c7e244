"""Command-line entry point: ``qpareto <command> [options]``.

Every command writes CSV/JSON under ``--out``. Exit codes: 0 success, 2 an
expected failure recorded as data (e.g. an infeasible weight request or the
overdetermined MUB tracking variant), 1 an error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, io
from .core import expectations, propagate
from .experiments import (
    SCENARIOS,
    ExperimentConfig,
    build_grid,
    build_rho,
    build_system,
    commuting_set,
    preset_config,
    rerun,
    run_scenario,
)
from .core import random_density_matrix
from .fields import fluence, power_spectrum, random_transition_field
from .kinematics import (
    InfeasibleWeightsError,
    kinematic_flow,
    matching_extrema,
    pareto_report,
    partition_permutations,
    weight_solver,
)
from .measurement import build_mub, mle_estimate, read_records_csv, simulate_mub_records, write_records_csv
from .motc import FluencePolicy, GeodesicTrack, LevelSetDriftError, TrackPlan, level_set_excursion, run_track

log = logging.getLogger("qpareto")


class ExpectedFailure(Exception):
    """A run that ended in a documented failure mode; reported with exit code 2."""


def _load_config(args):
    data = io.read_json(args.config) if args.config else {}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out
    return data


def _setup(args):
    """System, rho0, grid, field seed and output directory from --config/--seed/--out."""
    data = _load_config(args)
    system = build_system(data.get("system", {"source": "paper-11"}))
    rho = build_rho(data.get("rho0", {"kind": "thermal", "beta": 4.0}), system)
    grid = build_grid(data.get("grid", {}))
    out = Path(data.get("out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return data, system, rho, grid, int(data.get("seed", 0)), out


def _floats(text):
    return [float(x) for x in text.split(",")] if text else None


# ---------------------------------------------------------------- commands


def cmd_simulate(args):
    _, system, rho, grid, seed, out = _setup(args)
    f = random_transition_field(system, seed, args.amplitude_weighting, grid)
    u = propagate(system, f).final
    obs = commuting_set(system) if system.dim >= 4 else []
    io.write_csv(out / "field.csv", ["t", "epsilon"], zip(grid.sample_times, f.values))
    spec = power_spectrum(f)
    io.write_csv(out / "spectrum.csv", ["omega", "power"], zip(spec.frequencies, spec.power))
    io.write_json(out / "simulate.json", {"seed": seed, "fluence": fluence(f), "propagator": io.matrix_to_json(u),
                                          "expectations": expectations(u, rho, obs).tolist() if obs else []})
    return 0


def cmd_track(args):
    _, system, rho, grid, seed, out = _setup(args)
    obs = commuting_set(system)
    weights = _floats(args.weights) or [0.7, 0.2, 0.1]
    f0 = random_transition_field(system, seed, False, grid)
    u0 = propagate(system, f0).final
    flow = kinematic_flow(rho, obs, weights, u0, stop_fraction=args.target_fraction)
    plan = TrackPlan(GeodesicTrack(rho, obs, u0, flow.unitary), beta=args.beta, integrator=args.integrator,
                     s_steps=args.s_steps, substep_tol=args.substep_tol)
    res = run_track(system, rho, obs, f0, plan, raise_on_divergence=False)
    res.write(out, {"seed": seed, "weights": weights})
    print(f"final error {res.final_error:.3e}, max per-observable error {res.max_observable_error:.3e}")
    if res.status != "ok":
        raise ExpectedFailure(f"tracking {res.status}")
    return 0


def cmd_levelset(args):
    _, system, rho, grid, seed, out = _setup(args)
    obs = commuting_set(system)
    f0 = random_transition_field(system, seed, False, grid)
    try:
        res = level_set_excursion(system, rho, obs, f0, FluencePolicy(eta=args.eta), s_steps=args.s_steps)
    except LevelSetDriftError as exc:
        exc.result.write(out, {"seed": seed})
        raise ExpectedFailure(str(exc)) from exc
    res.write(out, {"seed": seed, "eta": args.eta})
    print(f"fluence {res.fluences[0]:.4g} -> {res.fluences[-1]:.4g}, drift {res.max_observable_error:.3e}")
    return 0


def cmd_kinflow(args):
    _, system, rho, grid, seed, out = _setup(args)
    obs = commuting_set(system)
    weights = _floats(args.weights) or [0.7, 0.2, 0.1]
    flow = kinematic_flow(rho, obs, weights, steps=args.steps, stop_fraction=args.target_fraction)
    io.write_csv(out / "kinflow.csv", ["step", "objective"] + [f"phi_{k + 1}" for k in range(len(obs))],
                 [[i, o, *row] for i, (o, row) in enumerate(zip(flow.objective, flow.expectations))])
    io.write_json(out / "kinflow.json", {"weights": weights, "steps": flow.steps, "converged": flow.converged,
                                         "unitary": io.matrix_to_json(flow.unitary),
                                         "ranges": [list(matching_extrema(rho, o)) for o in obs]})
    return 0


def cmd_pareto_analyze(args):
    _, system, rho, grid, seed, out = _setup(args)
    obs = commuting_set(system)
    report = pareto_report(rho, obs, targets=_floats(args.targets), seed=seed)
    (out / "pareto_report.json").write_text(report.to_json(indent=2, sort_keys=True) + "\n")
    if system.dim <= 8:
        for k, o in enumerate(obs):
            partition_permutations(rho, o, k).write_csv(out / f"classes_{k + 1}.csv")
    print(report.to_json(indent=2, sort_keys=True))
    if report.feasible is False:
        raise ExpectedFailure("targets are not reachable")
    return 0


def cmd_weights(args):
    _, system, rho, grid, seed, out = _setup(args)
    obs = commuting_set(system)
    requested = {int(k) - 1: int(v) for k, v in (item.split(":") for item in args.request.split(","))}
    try:
        sol = weight_solver(rho, obs, requested)
    except InfeasibleWeightsError as exc:
        io.write_json(out / "weights.json", {"requested": requested, "feasible": False, "reason": str(exc)})
        raise ExpectedFailure(str(exc)) from exc
    io.write_json(out / "weights.json", {"requested": requested, "feasible": True, "weights": sol.weights,
                                         "permutation": list(sol.permutation), "margin": sol.margin,
                                         "critical_values": sol.critical_values})
    print("weights", " ".join(f"{w:.6g}" for w in sol.weights))
    return 0


def cmd_mub(args):
    out = Path(args.out or "out")
    fam = build_mub(args.dim)
    worst = max(float(np.max(np.abs(np.abs(a.conj().T @ b) ** 2 - 1.0 / args.dim)))
                for i, a in enumerate(fam.bases) for b in fam.bases[i + 1:])
    io.write_json(out / "mub.json", {"dim": args.dim, "bases": [io.matrix_to_json(v) for v in fam.bases],
                                     "max_overlap_deviation": worst})
    print(f"{len(fam.bases)} bases, max |overlap^2 - 1/N| = {worst:.2e}")
    return 0


def cmd_measure(args):
    data = _load_config(args)
    seed = int(data.get("seed", 0))
    out = Path(data.get("out", "out"))
    rho = random_density_matrix(args.dim, seed)
    records = simulate_mub_records(rho.matrix, build_mub(args.dim), args.shots, seed)
    write_records_csv(out / "records.csv", records)
    io.write_json(out / "truth.json", {"dim": args.dim, "seed": seed, "rho": io.matrix_to_json(rho.matrix)})
    return 0


def cmd_mle(args):
    data = _load_config(args)
    out = Path(data.get("out", "out"))
    records = read_records_csv(args.records)
    dim = len(records[0].counts)
    truth = io.matrix_from_json(io.read_json(args.truth)["rho"]) if args.truth else None
    est = mle_estimate(records, build_mub(dim), truth=truth, seed=int(data.get("seed", 0)))
    io.write_json(out / "estimate.json", est.to_dict())
    io.write_csv(out / "mle_history.csv", ["iteration", "log_likelihood"], enumerate(est.history))
    if est.fidelity_vs_truth is not None:
        print(f"fidelity {est.fidelity_vs_truth:.6f}")
    return 0


def cmd_scenario(args):
    if args.rerun:
        manifest, changed = rerun(args.rerun, args.out)
        if changed:
            print("outputs differ from the manifest:", ", ".join(changed))
            return 1
        print("all outputs reproduced")
        return manifest.exit_code
    data = _load_config(args)
    base = preset_config(args.name, args.preset).to_dict()
    for key, value in data.items():
        if key == "params":
            base["params"].update(value)
        else:
            base[key] = value
    base.setdefault("out", "runs")
    if args.out is None and "out" not in data:
        base["out"] = str(Path("runs") / args.name)
    base["scenario"] = args.name
    base["preset"] = args.preset
    if args.workers is not None:
        base["workers"] = args.workers
    manifest = run_scenario(ExperimentConfig.from_dict(base))
    for item in manifest.expected_failures:
        print("expected failure:", json.dumps(item, default=str))
    return manifest.exit_code


# ---------------------------------------------------------------- parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file with system/rho0/grid/params settings")
    common.add_argument("--seed", type=int, help="field / sampling seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--preset", choices=["desk", "paper"], default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qpareto", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="propagate a random transition field")
    s.add_argument("--amplitude-weighting", action="store_true")
    s.set_defaults(func=cmd_simulate)

    def track_opts(sp):
        sp.add_argument("--weights", help="comma-separated weights, e.g. 0.7,0.2,0.1")
        sp.add_argument("--target-fraction", type=float, default=0.87,
                        help="stop the kinematic flow when the dominant observable reaches this share of its max")

    s = sub.add_parser("track", parents=[common], help="MOTC geodesic track to a kinematic target")
    track_opts(s)
    s.add_argument("--beta", type=float, default=10.0)
    s.add_argument("--integrator", choices=["euler", "rk4"], default="euler")
    s.add_argument("--s-steps", type=int, default=None)
    s.add_argument("--substep-tol", type=float, default=None)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("levelset", parents=[common], help="fluence-lowering level-set excursion")
    s.add_argument("--eta", type=float, default=10.0)
    s.add_argument("--s-steps", type=int, default=100)
    s.set_defaults(func=cmd_levelset)

    s = sub.add_parser("kinflow", parents=[common], help="weighted kinematic gradient flow on U(N)")
    track_opts(s)
    s.set_defaults(target_fraction=None)
    s.add_argument("--steps", type=int, default=5000)
    s.set_defaults(func=cmd_kinflow)

    s = sub.add_parser("pareto-analyze", parents=[common], help="ranges, feasibility and critical classes")
    s.add_argument("--targets", help="comma-separated target expectation values")
    s.set_defaults(func=cmd_pareto_analyze)

    s = sub.add_parser("weights", parents=[common], help="design weights for requested critical classes")
    s.add_argument("--request", required=True, help="observable:class pairs, 1-based observables, e.g. 1:0,2:0")
    s.set_defaults(func=cmd_weights)

    s = sub.add_parser("mub", parents=[common], help="build mutually unbiased bases")
    s.add_argument("--dim", type=int, required=True)
    s.set_defaults(func=cmd_mub)

    s = sub.add_parser("measure", parents=[common], help="simulate MUB measurements of a random state")
    s.add_argument("--dim", type=int, default=3)
    s.add_argument("--shots", type=int, default=100_000)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("mle", parents=[common], help="maximum-likelihood state estimate from records")
    s.add_argument("--records", required=True)
    s.add_argument("--truth", help="truth.json written by 'measure', for the fidelity report")
    s.set_defaults(func=cmd_mle)

    s = sub.add_parser("scenario", parents=[common], help="run a named scenario")
    s.add_argument("name", choices=SCENARIOS)
    s.add_argument("--workers", type=int, default=None)
    s.add_argument("--rerun", metavar="MANIFEST", help="re-run from a manifest and compare CSV hashes")
    s.set_defaults(func=cmd_scenario)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args) or 0)
    except ExpectedFailure as exc:
        print(f"expected failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and map to exit code 1
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())
