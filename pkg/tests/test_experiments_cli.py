import json

import numpy as np
import pytest

from qpareto import io
from qpareto.cli import build_parser, main
from qpareto.experiments import (
    SCENARIOS,
    ExperimentConfig,
    RunManifest,
    build_rho,
    build_system,
    commuting_set,
    preset_config,
    rerun,
    run_scenario,
)
from qpareto.measurement import fidelity

SMALL_GRID = {"t_final": 20.0, "steps": 128}
SMALL = {
    "pareto_sweep": {"system": {"source": "random", "dim": 4, "seed": 3},
                     "params": {"weights": [[0.7, 0.2, 0.1]], "s_steps": 10, "substep_tol": None,
                                "target_fraction": 0.6}},
    "gramian_ensemble": {"system": {"source": "random", "dim": 3, "seed": 1}, "params": {"n_fields": 3}},
    "mub_tracking": {"system": {"source": "random", "dim": 3, "seed": 1},
                     "params": {"m_values": [2, 8], "s_steps": 10, "target_fraction": 0.999}},
    "tomography_roundtrip": {"params": {"dims": [3], "shots": 20_000, "s_steps": 10}},
}


def small_config(name, tmp_path, **kw):
    spec = {**SMALL[name], **kw}
    return preset_config(name, "desk", grid=SMALL_GRID, out=str(tmp_path / name), **spec)


# ---------------------------------------------------------------- config and builders


def test_config_round_trip_and_validation():
    cfg = preset_config("gramian_ensemble", "paper", seed=4)
    assert cfg.system["dim"] == 11 and cfg.params["n_fields"] == 100
    back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ValueError):
        ExperimentConfig("nope")
    with pytest.raises(ValueError):
        preset_config("pareto_sweep", "huge")


def test_every_scenario_has_both_presets():
    for name in SCENARIOS:
        assert preset_config(name, "desk").scenario == name
        assert preset_config(name, "paper").preset == "paper"


def test_builders():
    sys_ = build_system({"source": "paper-11"})
    assert sys_.dim == 11
    rho = build_rho({"kind": "thermal", "beta": 4.0}, sys_).matrix
    assert np.all(np.diff(np.diag(rho).real) < 0)
    pure = build_rho({"kind": "pure"}, sys_).matrix
    assert np.trace(pure @ pure).real == pytest.approx(1.0)
    obs = commuting_set(sys_)
    for a in obs:
        for b in obs:
            assert np.allclose(a @ b, b @ a)
    assert [round(np.trace(o).real) for o in obs] == [3, 1, 1]
    with pytest.raises(ValueError):
        build_system({"source": "elsewhere"})
    with pytest.raises(ValueError):
        build_rho({"kind": "hot"}, sys_)


# ---------------------------------------------------------------- scenarios


@pytest.mark.parametrize("name", SCENARIOS)
def test_scenario_runs_and_reruns_identically(name, tmp_path):
    manifest = run_scenario(small_config(name, tmp_path))
    out = tmp_path / name
    assert (out / "manifest.json").exists()
    assert manifest.outputs and all(len(h) == 64 for h in manifest.outputs.values())
    again, changed = rerun(out / "manifest.json", tmp_path / f"{name}_again")
    assert changed == []
    assert again.outputs == manifest.outputs


def test_manifest_round_trip(tmp_path):
    m = RunManifest({"scenario": "x"}, "0", 1.5, [{"a": 1}], {"f.csv": "0" * 64}, 2, [{"why": "test"}])
    m.write(tmp_path / "m.json")
    assert RunManifest.read(tmp_path / "m.json") == m


def test_parallel_cells_match_serial(tmp_path):
    cfg = small_config("gramian_ensemble", tmp_path)
    serial = run_scenario(cfg)
    cfg.out, cfg.workers = str(tmp_path / "par"), 2
    assert run_scenario(cfg).outputs == serial.outputs


def test_pareto_outputs(tmp_path):
    run_scenario(small_config("pareto_sweep", tmp_path))
    out = tmp_path / "pareto_sweep"
    header, rows = io.read_csv(out / "pareto_summary.csv")
    assert header[:4] == ["index", "alpha_1", "alpha_2", "alpha_3"] and len(rows) == 1
    cell = out / "weights_0"
    for f in ("track.csv", "field_s0.csv", "field_smid.csv", "field_sfinal.csv", "kinematic_flow.csv",
              "spectrum.csv", "track_manifest.json"):
        assert (cell / f).exists()


def test_gramian_outputs(tmp_path):
    run_scenario(small_config("gramian_ensemble", tmp_path))
    header, rows = io.read_csv(tmp_path / "gramian_ensemble" / "summary.csv")
    assert "median_log10" in header
    # N = 3: m in {4, 8}, 2 field kinds, 2 states
    assert len(rows) == 8
    header, rows = io.read_csv(tmp_path / "gramian_ensemble" / "condition_numbers.csv")
    assert len(rows) == 3 * 8


def test_mub_expected_failure_exit_code(tmp_path):
    cfg = small_config("mub_tracking", tmp_path, params={**SMALL["mub_tracking"]["params"], "success_tol": 1e-12})
    manifest = run_scenario(cfg)
    assert manifest.exit_code == 2
    assert manifest.expected_failures[0]["variant"] == "pure_m8"
    header, rows = io.read_csv(tmp_path / "mub_tracking" / "mub_summary.csv")
    assert [r[0] for r in rows] == ["thermal_m2", "thermal_m8", "pure_m8"]


def test_tomography_outputs(tmp_path):
    manifest = run_scenario(small_config("tomography_roundtrip", tmp_path))
    (cell,) = [c for c in manifest.stages if "N" in c]
    assert cell["fidelity"] > 0.99 and cell["fidelity_exact"] > 1 - 1e-6
    assert (tmp_path / "tomography_roundtrip" / "N3" / "records.csv").exists()


# ---------------------------------------------------------------- CLI


def _cfg_file(tmp_path, **data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return str(path)


def test_parser_lists_every_command():
    text = build_parser().format_help()
    for cmd in ("simulate", "track", "levelset", "kinflow", "pareto-analyze", "weights", "mub", "measure", "mle",
                "scenario"):
        assert cmd in text


def test_cli_mub(tmp_path, capsys):
    assert main(["mub", "--dim", "5", "--out", str(tmp_path)]) == 0
    data = json.loads((tmp_path / "mub.json").read_text())
    assert data["max_overlap_deviation"] < 1e-9
    assert main(["mub", "--dim", "4", "--out", str(tmp_path)]) == 1


def test_cli_measure_then_mle(tmp_path):
    assert main(["measure", "--dim", "3", "--shots", "100000", "--seed", "2", "--out", str(tmp_path)]) == 0
    assert main(["mle", "--records", str(tmp_path / "records.csv"), "--truth", str(tmp_path / "truth.json"),
                 "--out", str(tmp_path)]) == 0
    est = json.loads((tmp_path / "estimate.json").read_text())
    truth = io.matrix_from_json(io.read_json(tmp_path / "truth.json")["rho"])
    assert fidelity(truth, io.matrix_from_json(est["rho_hat"])) > 0.99


def test_cli_weights_feasible_and_infeasible(tmp_path):
    cfg = _cfg_file(tmp_path, system={"source": "random", "dim": 4, "seed": 2}, rho0={"kind": "random", "seed": 1})
    assert main(["weights", "--config", cfg, "--request", "1:0,2:0", "--out", str(tmp_path / "a")]) == 0
    data = json.loads((tmp_path / "a" / "weights.json").read_text())
    assert data["feasible"] and sum(data["weights"]) == pytest.approx(1.0)
    # both single-level projectors want the largest population: no common permutation
    assert main(["weights", "--config", cfg, "--request", "2:0,3:0", "--out", str(tmp_path / "b")]) == 2
    assert json.loads((tmp_path / "b" / "weights.json").read_text())["feasible"] is False


def test_cli_dynamics_commands(tmp_path):
    cfg = _cfg_file(tmp_path, system={"source": "random", "dim": 4, "seed": 2}, grid=SMALL_GRID)
    out = str(tmp_path / "o")
    assert main(["simulate", "--config", cfg, "--out", out]) == 0
    assert main(["kinflow", "--config", cfg, "--out", out, "--weights", "0.5,0.3,0.2"]) == 0
    assert main(["pareto-analyze", "--config", cfg, "--out", out]) == 0
    assert main(["track", "--config", cfg, "--out", out, "--s-steps", "10", "--target-fraction", "0.6"]) in (0, 2)
    assert main(["levelset", "--config", cfg, "--out", out, "--s-steps", "10"]) == 0
    for f in ("field.csv", "kinflow.csv", "pareto_report.json", "track.csv"):
        assert (tmp_path / "o" / f).exists()


def test_cli_scenario_and_rerun(tmp_path, capsys):
    out = tmp_path / "run"
    cfg = _cfg_file(tmp_path, grid=SMALL_GRID, **SMALL["tomography_roundtrip"])
    assert main(["scenario", "tomography_roundtrip", "--config", cfg, "--out", str(out)]) == 0
    assert main(["scenario", "tomography_roundtrip", "--rerun", str(out / "manifest.json"),
                 "--out", str(tmp_path / "again")]) == 0
    assert "all outputs reproduced" in capsys.readouterr().out


def test_cli_error_exit_code(tmp_path):
    assert main(["mle", "--records", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 1
