import json
import warnings
from pathlib import Path

import numpy as np
import pytest
import yaml

from olfc import load_scenario, save_scenario, scenario_hash
from olfc.cli import main
from olfc.errors import ValidationError

from conftest import CASE_STUDY, CASE_STUDY_A_ZERO, CASE_STUDY_PRIMAL_DUAL, SCENARIO_DIR


def write_short_scenario(tmp_path, **sim_over):
    """Bundled case study shrunk for fast CLI runs."""
    raw = yaml.safe_load(open(CASE_STUDY))
    raw["simulation"].update({"t_end": 0.05, "dt": 1e-4, "record_stride": 5})
    raw["demand"]["events"] = [{"time": 0.01, "delta": [0.010, 0.015, 0.012, 0.014]}]
    raw["simulation"].update(sim_over)
    path = tmp_path / "short.yaml"
    path.write_text(yaml.safe_dump(raw))
    return path


class TestLoading:
    @pytest.mark.parametrize("path", [CASE_STUDY, CASE_STUDY_A_ZERO, CASE_STUDY_PRIMAL_DUAL])
    def test_bundled_scenarios_load_without_warnings(self, path):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            scen = load_scenario(path)
        assert scen.network.n == 4

    def test_m3_zero_rejected_with_rule(self, tmp_path):
        raw = yaml.safe_load(open(CASE_STUDY))
        raw["controller"]["M3"] = 0.0
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump(raw))
        with pytest.raises(ValidationError, match="controller.M3-strictly-positive"):
            load_scenario(p)

    def test_disconnected_communication_rejected(self, tmp_path):
        raw = yaml.safe_load(open(CASE_STUDY))
        raw["controller"]["communication"]["edges"] = [[1, 2], [3, 4]]
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump(raw))
        with pytest.raises(ValidationError, match="controller.communication-connected"):
            load_scenario(p)

    def test_unknown_key_rejected_with_path(self, tmp_path):
        raw = yaml.safe_load(open(CASE_STUDY))
        raw["controller"]["M5"] = 1.0
        p = tmp_path / "bad.yaml"
        p.write_text(yaml.safe_dump(raw))
        with pytest.raises(ValidationError, match=r"controller.M5"):
            load_scenario(p)

    def test_yaml_syntax_error_reports_position(self, tmp_path):
        p = tmp_path / "broken.yaml"
        p.write_text("network:\n  areas: [\n")
        with pytest.raises(ValidationError, match="line"):
            load_scenario(p)

    def test_roundtrip_hash_equality(self, tmp_path):
        scen = load_scenario(CASE_STUDY)
        out = tmp_path / "saved.yaml"
        save_scenario(scen, out)
        assert scenario_hash(load_scenario(out)) == scenario_hash(scen)

    def test_hash_independent_of_formatting(self, tmp_path):
        raw = yaml.safe_load(open(CASE_STUDY))
        p = tmp_path / "reordered.yaml"
        p.write_text(yaml.safe_dump(raw, sort_keys=True, default_flow_style=True))
        assert scenario_hash(load_scenario(p)) == scenario_hash(load_scenario(CASE_STUDY))


class TestDispatchCommand:
    def test_prints_optimum_and_lambda(self, capsys):
        assert main(["dispatch", str(CASE_STUDY)]) == 0
        out = capsys.readouterr().out
        assert "lambda_opt" in out
        assert "379.598" in out
        assert "0.0156858" in out


class TestSimulateCommand:
    def test_writes_csv_with_exact_schema(self, tmp_path):
        scen_path = write_short_scenario(tmp_path)
        out = tmp_path / "run"
        assert main(["simulate", str(scen_path), "-o", str(out)]) == 0
        csv_path = out / "trajectory.csv"
        header = csv_path.read_text().splitlines()[0]
        expected = "t," + ",".join(
            f"{name}_{i}" for name in ("f", "V", "Pt", "Pg", "theta", "u", "w", "sigma")
            for i in range(1, 5))
        assert header == expected
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == scenario_hash(load_scenario(scen_path))
        assert "trajectory.csv" in manifest["artifacts"]
        assert (out / "plot_data.csv").read_text().splitlines()[0] == "t,series,area,value"

    def test_seventeen_significant_digits(self, tmp_path):
        scen_path = write_short_scenario(tmp_path)
        out = tmp_path / "run"
        main(["simulate", str(scen_path), "-o", str(out)])
        rows = (out / "trajectory.csv").read_text().splitlines()[1:]
        vals = [float(x) for x in rows[-1].split(",")]
        # values survive a text round trip exactly
        assert all(f"{v:.17g}" in rows[-1] for v in vals)

    def test_repeated_runs_byte_identical(self, tmp_path):
        scen_path = write_short_scenario(tmp_path)
        out1, out2 = tmp_path / "a", tmp_path / "b"
        main(["simulate", str(scen_path), "-o", str(out1)])
        main(["simulate", str(scen_path), "-o", str(out2)])
        assert (out1 / "trajectory.csv").read_bytes() == (out2 / "trajectory.csv").read_bytes()

    def test_env_var_default_output(self, tmp_path, monkeypatch):
        scen_path = write_short_scenario(tmp_path)
        monkeypatch.setenv("OLFC_OUTPUT_DIR", str(tmp_path / "envout"))
        monkeypatch.chdir(tmp_path)
        assert main(["simulate", str(scen_path)]) == 0
        assert (tmp_path / "envout" / "trajectory.csv").exists()


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path, capsys):
        missing = tmp_path / "nope.yaml"
        assert main(["simulate", str(missing), "-o", str(tmp_path / "o")]) == 2
        bad = tmp_path / "bad.yaml"
        raw = yaml.safe_load(open(CASE_STUDY))
        raw["controller"]["M3"] = 0.0
        bad.write_text(yaml.safe_dump(raw))
        assert main(["simulate", str(bad), "-o", str(tmp_path / "o")]) == 2
        assert "controller.M3-strictly-positive" in capsys.readouterr().err

    def test_numeric_abort_is_3(self, tmp_path, capsys):
        scen_path = write_short_scenario(tmp_path, t_end=50.0, dt=1.0, record_stride=1)
        raw = yaml.safe_load(open(scen_path))
        raw["demand"]["events"] = [{"time": 1.0, "delta": [0.01, 0.015, 0.012, 0.014]}]
        raw["simulation"]["initial_condition"] = {"explicit": {"f": [0.5, 0.5, 0.5, 0.5]}}
        scen_path.write_text(yaml.safe_dump(raw))
        assert main(["simulate", str(scen_path), "-o", str(tmp_path / "o")]) == 3
        assert "numeric abort" in capsys.readouterr().err

    def test_verify_failure_is_1(self, tmp_path):
        # far too short to settle: criteria cannot pass
        scen_path = write_short_scenario(tmp_path, t_end=0.05)
        out = tmp_path / "v"
        assert main(["verify", str(scen_path), "-o", str(out)]) == 1
        report = json.loads((out / "report.json").read_text())
        assert report["passed"] is False
        assert (out / "report.txt").exists()

    def test_verify_tolerances_override(self, tmp_path):
        scen_path = write_short_scenario(tmp_path)
        tol_path = tmp_path / "tol.yaml"
        tol_path.write_text("freq_band: 10.0\n")
        out = tmp_path / "v"
        rc = main(["verify", str(scen_path), "--tolerances", str(tol_path), "-o", str(out)])
        report = json.loads((out / "report.json").read_text())
        assert rc in (0, 1)
        assert report["criteria"]["frequency-settling"] is False or report["settling_time"] is not None
        bad_tol = tmp_path / "badtol.yaml"
        bad_tol.write_text("no_such_field: 1.0\n")
        assert main(["verify", str(scen_path), "--tolerances", str(bad_tol), "-o", str(out)]) == 2


class TestSweepCommand:
    def test_grid_runs_in_parallel_with_manifest(self, tmp_path):
        scen_path = write_short_scenario(tmp_path)
        grid = tmp_path / "grid.yaml"
        grid.write_text("controller.M1:\n  - [3.0, 3.0, 3.0, 3.0]\n  - [2.0, 2.0, 2.0, 2.0]\n")
        out = tmp_path / "sweep"
        assert main(["sweep", str(scen_path), "--grid", str(grid), "-j", "2", "-o", str(out)]) == 0
        manifest = json.loads((out / "sweep_manifest.json").read_text())
        assert len(manifest["runs"]) == 2
        for r in manifest["runs"]:
            assert (Path(r["run_dir"]) / "trajectory.csv").exists()
        hashes = {r["config_hash"] for r in manifest["runs"]}
        assert len(hashes) == 2
