"""Scenario runners, their configuration and run manifests.

Each scenario takes an ExperimentConfig, writes CSV data under ``config.out``
and returns a RunManifest, which is also saved as ``manifest.json``. The
manifest echoes the full config, so ``rerun`` reproduces every CSV byte for
byte. Independent cells (weight triples, field draws, tracking variants) go
through ``_map``, which uses a process pool when ``workers > 1``.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, io
from .core import (
    TimeGrid,
    expectations,
    eleven_level_system,
    propagate,
    pure_state,
    random_density_matrix,
    random_system,
    sorted_eigh,
    thermal_state,
)
from .fields import ControlField, detuned_field, detuned_frequencies, power_spectrum, random_transition_field
from .gradients import functional_gradient
from .kinematics import kinematic_flow, matching_extrema
from .measurement import (
    build_mub,
    exact_mub_counts,
    mle_estimate,
    mle_from_frequencies,
    mub_observables,
    mub_projectors,
    simulate_mub_records,
    write_records_csv,
)
from .motc import CONDITION_LIMIT, FluencePolicy, GeodesicTrack, LinearTrack, TrackPlan, gramian, run_track

log = logging.getLogger(__name__)

SCENARIOS = ("pareto_sweep", "gramian_ensemble", "mub_tracking", "tomography_roundtrip")


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    """Everything a scenario needs; ``params`` holds scenario-specific knobs.

    system: {"source": "paper-11"} or {"source": "random", "dim": N, "seed": s}
    rho0:   {"kind": "thermal", "beta": b} | {"kind": "pure"} | {"kind": "random", "seed": s}
    grid:   {"t_final": T, "steps": M}
    """

    scenario: str
    preset: str = "desk"
    seed: int = 0
    system: dict = field(default_factory=lambda: {"source": "paper-11"})
    rho0: dict = field(default_factory=lambda: {"kind": "thermal", "beta": 4.0})
    grid: dict = field(default_factory=lambda: {"t_final": 100.0, "steps": 1024})
    params: dict = field(default_factory=dict)
    out: str = "runs"
    workers: int = 1

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}; choose from {', '.join(SCENARIOS)}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {k: copy.deepcopy(v) for k, v in data.items() if k in cls.__dataclass_fields__}
        return cls(**known)


@dataclass
class RunManifest:
    config: dict
    version: str
    wall_time: float
    stages: list
    outputs: dict  # relative path -> sha256 of every CSV written
    exit_code: int = 0
    expected_failures: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)

    def write(self, path):
        return io.write_json(path, self.to_dict())

    @classmethod
    def read(cls, path):
        return cls(**io.read_json(path))


def _desk_or_paper(desk, paper):
    return {"desk": desk, "paper": paper}


PRESETS = {
    "pareto_sweep": _desk_or_paper(
        {"system": {"source": "random", "dim": 5, "seed": 3}, "seed": 1,
         "params": {"s_steps": 100, "substep_tol": 5e-3}},
        {"system": {"source": "paper-11"}, "seed": 1, "params": {"s_steps": 100, "substep_tol": 5e-3}}),
    "gramian_ensemble": _desk_or_paper(
        {"system": {"source": "random", "dim": 5, "seed": 11}, "params": {"n_fields": 30}},
        {"system": {"source": "random", "dim": 11, "seed": 11}, "params": {"n_fields": 100}}),
    "mub_tracking": _desk_or_paper(
        {"system": {"source": "random", "dim": 5, "seed": 5}, "seed": 3,
         "params": {"m_values": [2, 6, 8, 16], "s_steps": 100}},
        {"system": {"source": "random", "dim": 11, "seed": 11}, "seed": 2,
         "params": {"m_values": [5, 15, 20, 40], "s_steps": 100}}),
    "tomography_roundtrip": _desk_or_paper(
        {"system": {"source": "random", "dim": 3, "seed": 4}, "params": {"dims": [3]}},
        {"system": {"source": "random", "dim": 3, "seed": 4}, "params": {"dims": [3, 5]}}),
}


def preset_config(scenario, preset="desk", **overrides) -> ExperimentConfig:
    if preset not in ("desk", "paper"):
        raise ValueError("preset must be 'desk' or 'paper'")
    base = copy.deepcopy(PRESETS[scenario][preset])
    params = base.pop("params", {})
    params.update(overrides.pop("params", {}) or {})
    base.update(overrides)
    return ExperimentConfig(scenario=scenario, preset=preset, params=params, **base)


# ---------------------------------------------------------------- builders


def build_system(spec):
    src = spec.get("source", "paper-11")
    if src == "paper-11":
        return eleven_level_system()
    if src == "random":
        return random_system(int(spec["dim"]), int(spec.get("seed", 0)), float(spec.get("coupling", 0.15)))
    raise ValueError(f"unknown system source {src!r}")


def build_rho(spec, system):
    kind = spec.get("kind", "thermal")
    if kind == "thermal":
        return thermal_state(system.h0, float(spec.get("beta", 4.0)))
    if kind in ("pure", "pure-ground"):
        _, v = sorted_eigh(system.h0)
        return pure_state(system.dim, 0, v)
    if kind == "random":
        return random_density_matrix(system.dim, int(spec.get("seed", 0)))
    raise ValueError(f"unknown rho0 kind {kind!r}")


def build_grid(spec):
    return TimeGrid(float(spec.get("t_final", 100.0)), int(spec.get("steps", 1024)))


def commuting_set(system):
    """Projector on the three highest levels and the projectors on levels 2 and 3."""
    _, v = sorted_eigh(system.h0)
    n = system.dim
    if n < 4:
        raise ValueError("the commuting set needs at least 4 levels")

    def proj(idx):
        return (v[:, idx] @ v[:, idx].conj().T).astype(complex)

    return [proj([n - 3, n - 2, n - 1]), proj([1]), proj([2])]


def _map(fn, cells, workers):
    if workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, cells))
    return [fn(c) for c in cells]


def _hash_outputs(out):
    out = Path(out)
    return {str(p.relative_to(out)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(out.rglob("*.csv"))}


def _spectrum_rows(fields_):
    specs = [power_spectrum(f) for f in fields_]
    return [[specs[0].frequencies[i], *(s.power[i] for s in specs)] for i in range(specs[0].frequencies.size)]


def _plan(params, track):
    eta = params.get("fluence_eta")
    free = None if eta is None else FluencePolicy(eta=float(eta))
    return TrackPlan(track, free=free, beta=float(params.get("beta", 10.0)),
                     integrator=params.get("integrator", "euler"),
                     s_steps=params.get("s_steps"), inversion=params.get("inversion", "auto"),
                     substep_tol=params.get("substep_tol"), max_substeps=int(params.get("max_substeps", 256)))


# ---------------------------------------------------------------- pareto sweep


def _pareto_cell(args):
    config, index, weights = args
    p = config.params
    system = build_system(config.system)
    rho = build_rho(config.rho0, system)
    grid = build_grid(config.grid)
    obs = commuting_set(system)
    f0 = random_transition_field(system, config.seed, bool(p.get("amplitude_weighting", False)), grid)
    u0 = propagate(system, f0).final
    dominant = int(np.argmax(weights))
    flow = kinematic_flow(rho, obs, weights, u0, stop_index=dominant,
                          stop_fraction=p.get("target_fraction", 0.87))
    track = GeodesicTrack(rho, obs, u0, flow.unitary)
    res = run_track(system, rho, obs, f0, _plan(p, track), raise_on_divergence=False)
    cell = Path(config.out) / f"weights_{index}"
    res.write(cell, {"weights": list(weights), "field_seed": config.seed})
    io.write_csv(cell / "kinematic_flow.csv", ["step"] + [f"phi_{k + 1}" for k in range(len(obs))],
                 [[i, *row] for i, row in enumerate(flow.expectations)])
    io.write_csv(cell / "spectrum.csv", ["omega", "power_initial", "power_final"],
                 _spectrum_rows([f0, res.field_at(len(res.s) - 1)]))
    ext = np.array([matching_extrema(rho, o) for o in obs])
    phi = res.expectations[-1]
    frac = (phi - ext[:, 0]) / (ext[:, 1] - ext[:, 0])
    return {"index": index, "weights": list(map(float, weights)), "phi": phi.tolist(),
            "range_fraction": frac.tolist(), "dominant": dominant,
            "dominant_fraction_of_max": float(phi[dominant] / ext[dominant, 1]),
            "final_observable_error": float(res.observable_errors[-1].max()),
            "max_observable_error": res.max_observable_error, "status": res.status,
            "max_condition": float(res.condition_numbers.max()), "flow_steps": flow.steps}


def scenario_pareto_sweep(config: ExperimentConfig):
    weights = config.params.get("weights", [[0.7, 0.2, 0.1], [0.2, 0.7, 0.1], [0.1, 0.2, 0.7]])
    cells = _map(_pareto_cell, [(config, i, w) for i, w in enumerate(weights)], config.workers)
    rows = [[c["index"], *c["weights"], *c["phi"], *c["range_fraction"], c["dominant_fraction_of_max"],
             c["final_observable_error"], c["max_observable_error"], c["status"]] for c in cells]
    io.write_csv(Path(config.out) / "pareto_summary.csv",
                 ["index", "alpha_1", "alpha_2", "alpha_3", "phi_1", "phi_2", "phi_3", "frac_1", "frac_2",
                  "frac_3", "dominant_fraction_of_max", "final_error", "max_error", "status"], rows)
    return cells, []


# ---------------------------------------------------------------- gramian ensemble


def _ensemble_cell(args):
    config, k = args
    p = config.params
    system = build_system(config.system)
    grid = build_grid(config.grid)
    n = system.dim
    m_values = p.get("m_values") or [2 * n - 2, 4 * n - 4]
    obs = mub_observables(build_mub(n), count=max(m_values))
    seed = config.seed * 100003 + k
    fields = {"tuned": random_transition_field(system, seed, grid=grid)}
    if p.get("detuned", True):
        fields["detuned"] = detuned_field(detuned_frequencies(system.h0), seed, grid)
    rows = []
    for kind, f in fields.items():
        path = propagate(system, f)
        for rho_kind in p.get("rho_kinds", ["pure", "thermal"]):
            rho = build_rho({"kind": rho_kind, "beta": config.rho0.get("beta", 4.0)}, system)
            grads = functional_gradient(system, f, rho, obs, path=path)
            for m in m_values:
                g = gramian(type(grads)(grads.grid, grads.samples[:m]))
                rows.append([kind, rho_kind, m, k, float(np.log10(g.condition_number))])
    return rows


def _quantiles(x):
    x = np.asarray(x, dtype=float)
    return [float(np.quantile(x, q)) for q in (0.1, 0.5, 0.9)]


def scenario_gramian_ensemble(config: ExperimentConfig):
    p = config.params
    n_fields = int(p.get("n_fields", 100))
    rows = [r for cell in _map(_ensemble_cell, [(config, k) for k in range(n_fields)], config.workers)
            for r in cell]
    rows.sort(key=lambda r: (r[0], r[1], r[2], r[3]))
    out = Path(config.out)
    io.write_csv(out / "condition_numbers.csv", ["field_kind", "rho0", "m", "field_index", "log10_condition"],
                 rows)
    system = build_system(config.system)
    n = system.dim
    edges = np.arange(0.0, 20.5, 0.5)
    hist, summary, cells = [], [], []
    for key in sorted({(r[0], r[1], r[2]) for r in rows}):
        vals = np.array([r[4] for r in rows if (r[0], r[1], r[2]) == key])
        counts, _ = np.histogram(np.clip(vals, edges[0], edges[-1] - 1e-12), bins=edges)
        hist += [[*key, edges[i], edges[i + 1], int(c)] for i, c in enumerate(counts)]
        rank = 1 if key[1] == "pure" else n
        bound = 2 * n * rank - rank ** 2
        q10, q50, q90 = _quantiles(vals)
        above = float(np.mean(vals > np.log10(CONDITION_LIMIT)))
        summary.append([*key, rank, bound, int(key[2] > bound), q10, q50, q90, above])
        cells.append({"field_kind": key[0], "rho0": key[1], "m": key[2], "median_log10": q50,
                      "fraction_above_limit": above, "overdetermined": key[2] > bound})
    io.write_csv(out / "histogram.csv", ["field_kind", "rho0", "m", "bin_lo", "bin_hi", "count"], hist)
    io.write_csv(out / "summary.csv", ["field_kind", "rho0", "m", "rho_rank", "max_m_bound", "overdetermined",
                                       "q10_log10", "median_log10", "q90_log10", "fraction_above_1e9"], summary)
    return cells, []


# ---------------------------------------------------------------- MUB tracking


def _mub_target(config):
    """System and initial field shared by every tracking variant."""
    system = build_system(config.system)
    grid = build_grid(config.grid)
    f0 = random_transition_field(system, config.seed, grid=grid)
    return system, f0


def _mub_cell(args):
    config, rho_kind, m = args
    p = config.params
    system, f0 = _mub_target(config)
    rho = build_rho({**config.rho0, "kind": rho_kind}, system)
    obs = mub_observables(build_mub(system.dim), count=m)
    u0 = propagate(system, f0).final
    # target close to the maximum manifold of the first observable
    flow = kinematic_flow(rho, obs[:1], [1.0], u0, stop_fraction=p.get("target_fraction", 0.9))
    track = GeodesicTrack(rho, obs, u0, flow.unitary)
    if p.get("track", "linear") == "linear":
        # straight line between the geodesic endpoints; unlike the geodesic it can
        # leave the set of reachable expectation vectors when m exceeds the orbit dimension
        track = LinearTrack(track(0.0)[0], track(1.0)[0])
    res = run_track(system, rho, obs, f0, _plan(p, track), raise_on_divergence=False)
    name = f"{rho_kind}_m{m}"
    res.write(Path(config.out) / name, {"rho0": rho_kind, "m": m, "field_seed": config.seed})
    return {"variant": name, "rho0": rho_kind, "m": m, "status": res.status,
            "final_observable_error": float(res.observable_errors[-1].max()),
            "max_observable_error": res.max_observable_error,
            "max_log10_condition": float(np.log10(res.condition_numbers.max())),
            "phi1": res.expectations[:, 0].tolist(), "final_field": res.fields[-1].tolist()}


def scenario_mub_tracking(config: ExperimentConfig):
    p = config.params
    m_values = list(p.get("m_values", [5, 15, 20, 40]))
    variants = [("thermal", m) for m in m_values] + [("pure", max(m_values))]
    cells = _map(_mub_cell, [(config, r, m) for r, m in variants], config.workers)
    out = Path(config.out)
    by_m = {c["m"]: c for c in cells if c["rho0"] == "thermal"}
    ref = by_m[m_values[0]]
    grid = build_grid(config.grid)
    rows = []
    for c in cells:
        gap = float(np.max(np.abs(np.asarray(c["phi1"]) - np.asarray(ref["phi1"])))) if c["rho0"] == "thermal" else ""
        rows.append([c["variant"], c["rho0"], c["m"], c["status"], c["final_observable_error"],
                     c["max_observable_error"], c["max_log10_condition"], gap])
    io.write_csv(out / "mub_summary.csv", ["variant", "rho0", "m", "status", "final_error", "max_error",
                                          "max_log10_condition", "first_observable_gap"], rows)
    spec_ms = [m for m in m_values[:3]]
    io.write_csv(out / "spectra_final.csv", ["omega"] + [f"power_m{m}" for m in spec_ms],
                 _spectrum_rows([ControlField(grid, np.asarray(by_m[m]["final_field"])) for m in spec_ms]))
    thermal = by_m[max(m_values)]
    pure = next(c for c in cells if c["rho0"] == "pure")
    expected = []
    tol = float(p.get("success_tol", 1e-2))
    # tracking error of a variant = largest per-observable deviation anywhere along the track
    if pure["max_observable_error"] > tol:
        expected.append({"variant": pure["variant"], "reason": "overdetermined Gramian for pure rho0",
                         "max_error": pure["max_observable_error"]})
    summary = [{k: v for k, v in c.items() if k not in ("phi1", "final_field")} for c in cells]
    summary.append({
        "pure_to_thermal_max_error_ratio":
            pure["max_observable_error"] / max(thermal["max_observable_error"], 1e-300),
        "pure_to_thermal_final_error_ratio":
            pure["final_observable_error"] / max(thermal["final_observable_error"], 1e-300)})
    return summary, expected


# ---------------------------------------------------------------- tomography round trip


def _tomography_cell(args):
    config, n = args
    p = config.params
    shots = int(p.get("shots", 100_000))
    seed = config.seed
    truth = random_density_matrix(n, seed + n)
    family = build_mub(n)
    records = simulate_mub_records(truth.matrix, family, shots, seed)
    out = Path(config.out) / f"N{n}"
    write_records_csv(out / "records.csv", records)
    est = mle_estimate(records, family, truth=truth.matrix, seed=seed)
    counts = np.concatenate(exact_mub_counts(truth.matrix, family, float(shots)))
    exact = mle_from_frequencies(mub_projectors(family), counts, truth=truth.matrix, seed=seed)
    io.write_csv(out / "mle_history.csv", ["iteration", "log_likelihood"], enumerate(est.history))

    # downstream: kinematic target and a short MOTC track computed from rho_hat
    system = random_system(n, int(config.system.get("seed", 0)) + n)
    grid = build_grid(config.grid)
    theta = np.diag(np.arange(n, dtype=float)).astype(complex)
    f0 = random_transition_field(system, seed, grid=grid)
    u0 = propagate(system, f0).final
    target = {}
    for tag, rho in (("truth", truth.matrix), ("estimate", est.rho_hat.matrix)):
        flow = kinematic_flow(rho, [theta], [1.0], u0, stop_fraction=p.get("target_fraction", 0.95))
        target[tag] = flow.unitary
    phi_true_at = {tag: float(expectations(u, truth.matrix, [theta])[0]) for tag, u in target.items()}
    track = GeodesicTrack(est.rho_hat.matrix, [theta], u0, target["estimate"])
    res = run_track(system, est.rho_hat.matrix, [theta], f0,
                    _plan({"s_steps": p.get("s_steps", 100), **p}, track), raise_on_divergence=False)
    achieved = float(expectations(propagate(system, res.field_at(len(res.s) - 1)).final, truth.matrix, [theta])[0])
    res.write(out / "track", {"N": n})
    return {"N": n, "shots": shots, "fidelity": est.fidelity_vs_truth, "fidelity_exact": exact.fidelity_vs_truth,
            "log_likelihood": est.log_likelihood, "iterations": est.iterations,
            "phi_truth_target": phi_true_at["truth"], "phi_estimate_target": phi_true_at["estimate"],
            "target_gap": abs(phi_true_at["truth"] - phi_true_at["estimate"]),
            "track_final_error": res.final_error, "achieved_true_phi": achieved}


def scenario_tomography_roundtrip(config: ExperimentConfig):
    dims = list(config.params.get("dims", [3, 5]))
    cells = _map(_tomography_cell, [(config, n) for n in dims], config.workers)
    keys = ["N", "shots", "fidelity", "fidelity_exact", "log_likelihood", "iterations", "phi_truth_target",
            "phi_estimate_target", "target_gap", "track_final_error", "achieved_true_phi"]
    io.write_csv(Path(config.out) / "tomography_summary.csv", keys, [[c[k] for k in keys] for c in cells])
    return cells, []


# ---------------------------------------------------------------- dispatch


RUNNERS = {
    "pareto_sweep": scenario_pareto_sweep,
    "gramian_ensemble": scenario_gramian_ensemble,
    "mub_tracking": scenario_mub_tracking,
    "tomography_roundtrip": scenario_tomography_roundtrip,
}


def run_scenario(config: ExperimentConfig) -> RunManifest:
    """Run one scenario and write ``manifest.json`` next to its CSV files."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    stages, expected = RUNNERS[config.scenario](config)
    manifest = RunManifest(config.to_dict(), __version__, time.perf_counter() - start, stages,
                           _hash_outputs(out), 2 if expected else 0, expected)
    manifest.write(out / "manifest.json")
    log.info("%s finished in %.1f s", config.scenario, manifest.wall_time)
    return manifest


def rerun(manifest_path, out=None):
    """Re-run a scenario from its manifest; returns (new manifest, CSVs whose hash changed)."""
    old = RunManifest.read(manifest_path)
    cfg = ExperimentConfig.from_dict(old.config)
    if out is not None:
        cfg.out = str(out)
    new = run_scenario(cfg)
    changed = sorted(k for k in set(old.outputs) | set(new.outputs) if old.outputs.get(k) != new.outputs.get(k))
    return new, changed
