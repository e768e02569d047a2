import json
import os
import subprocess
import sys

from bulktrace.cli import main

SMALL = ["--set", "geometry.divisions=[2,2,1]", "--set", "orders.p=2"]
STUDY = ["--set", "study.orders=[2]", "--set", "study.levels=[[2,2,1],[3,3,1],[4,4,2]]",
         "--set", "study.reference=null"]


def test_list_presets(capsys):
    assert main(["--list-presets"]) == 0
    names = [line.split(":")[0] for line in capsys.readouterr().out.splitlines()]
    assert names == ["scordelis_lo", "scordelis_lo_quarter", "hyperbolic_paraboloid", "trig_graph_slab",
                     "sphere_slab", "flat_plate_oracle"]


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2


def test_run_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "flat_plate_oracle", "--out", str(out), *SMALL]) == 0
    assert {"report.json", "table.csv", "timings.json"} <= set(os.listdir(out))
    rep = json.loads((out / "report.json").read_text())
    assert rep["case"] == "flat_plate_oracle"
    assert "u_z(centre)" in rep["samples"] and rep["errors"]["eps_res_F"] >= 0
    header = (out / "table.csv").read_text().splitlines()[0]
    assert "wall_s" not in header
    assert "PASS Clapeyron" in capsys.readouterr().out


def test_run_with_exports(tmp_path):
    out = tmp_path / "exp"
    assert main(["run", "flat_plate_oracle", "--out", str(out), *SMALL, "--export-levels=-0.02,0.02"]) == 0
    assert sum(f.endswith(".vtu") for f in os.listdir(out)) == 3


def test_config_file_and_bad_keys(tmp_path, capsys):
    path = tmp_path / "case.yaml"
    path.write_text("preset: flat_plate_oracle\nmaterial: {E: 1.0e6, nu: 0.3, t: 0.05, colour: red}\n")
    assert main(["run", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "material.colour" in capsys.readouterr().err
    assert main(["run", "flat_plate_oracle", "--out", str(tmp_path / "o"), "--set", "orders.p=0"]) == 2
    assert main(["run", "no_such_case", "--out", str(tmp_path / "o")]) == 2
    assert main(["run", "flat_plate_oracle", "--out", str(tmp_path / "o"), "--set", "orders"]) == 2


def test_mesh_and_levelset_failures_exit_3(tmp_path, capsys):
    out = str(tmp_path / "o")
    assert main(["run", "flat_plate_oracle", "--out", out, *SMALL, "--set", "geometry.params.height=-1"]) == 3
    assert main(["run", "flat_plate_oracle", "--out", out, *SMALL, "--set", "levelset.params.normal=[0,0,0]"]) == 3
    assert "run failed" in capsys.readouterr().err


def test_check_failure_exit_4(tmp_path, capsys):
    # the coarse p=2 plate locks and misses the Navier reference by far
    out = str(tmp_path / "o")
    assert main(["run", "flat_plate_oracle", "--out", out, *SMALL]) == 0
    assert main(["run", "flat_plate_oracle", "--out", out, *SMALL, "--check"]) == 4
    assert "FAIL u_z(centre)" in capsys.readouterr().out


def test_study_outputs_and_check(tmp_path):
    out = tmp_path / "study"
    assert main(["study", "sphere_slab", "--out", str(out), *STUDY, "--check"]) == 0
    assert {"report.json", "table.csv", "table.json", "timings.json"} <= set(os.listdir(out))
    assert len((out / "table.csv").read_text().splitlines()) == 4
    strict = ["--set", "study.min_slope_offsets={eps_res_F: 5.0}"]
    assert main(["study", "sphere_slab", "--out", str(out), *STUDY, *strict, "--check"]) == 4


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "bulktrace.cli", "--list-presets"], capture_output=True, text=True)
    assert res.returncode == 0 and "sphere_slab" in res.stdout
