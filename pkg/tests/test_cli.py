import json
import subprocess
import sys

import numpy as np
import pytest

from conjpt import cli


def _write_config(tmp_path, payload, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


BENCH = {
    "schema": 1,
    "seed": 0,
    "problem": {"builtin": "bench1d"},
    "numerics": {"steps": 400},
    "scan": {"box": [[-1.0, 1.0]], "resolution": 41},
    "oracle": {"h": 0.01},
    "solve": {"z": [0.3]},
    "sens": {"z": [0.3], "v": [1.0]},
}

COV2D = {
    "schema": 1,
    "seed": 0,
    "problem": {"builtin": "cov2d"},
    "omega": {"box_radius": 3.0, "seeds_per_axis": 12, "directions": 16},
    "boxcount": {"epsilons": [0.2, 0.1, 0.05]},
    "hmodel": {"radius": 1.0, "per_axis": 3},
    "scan": {"box": [[0.0, 1.0], [-0.6, 0.4]], "resolution": 7},
    "solve": {"z": [0.4, -0.7]},
    "sens": {"z": [0.4, -0.7], "v": [0.6, 0.8]},
}


def test_scan_candidates_csv_columns(tmp_path):
    cfg = _write_config(tmp_path, BENCH)
    out = tmp_path / "out"
    assert cli.run("scan", cfg, str(out)) == 0
    lines = (out / "candidates.csv").read_text().splitlines()
    assert lines[0] == "z1,det,sigma_min,v1,kappa"
    assert len(lines) == 2
    fields = lines[1].split(",")
    assert abs(float(fields[0])) <= 1e-8
    assert float(fields[3]) == 1.0
    assert float(fields[4]) == pytest.approx(-1.0, abs=1e-6)


def test_scan_2d_candidates_csv_columns(tmp_path):
    cfg = _write_config(tmp_path, COV2D)
    out = tmp_path / "out"
    assert cli.run("scan", cfg, str(out)) == 0
    header = (out / "candidates.csv").read_text().splitlines()[0]
    assert header == "z1,z2,det,sigma_min,v1,v2,kappa"


def test_oracle_result_json(tmp_path):
    cfg = _write_config(tmp_path, BENCH)
    out = tmp_path / "out"
    assert cli.run("oracle", cfg, str(out)) == 0
    result = json.loads((out / "result.json").read_text())
    s = result["summary"]
    assert s["pass"] is True
    assert abs(s["g1"]) <= 1e-6
    assert abs(s["g2"]) <= 1e-6
    assert s["g3"] == pytest.approx(1.0, abs=1e-3)
    assert s["kappa"] == pytest.approx(-1.0, abs=1e-6)
    assert result["config_hash"]
    assert result["tolerances"]["steps"] == 400


def test_missing_horizon_reports_pointer(tmp_path, capsys):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "problem": {"mode": "cov", "n": 1, "psi": "z1^2", "L": "u1^2/2"},
        "solve": {"z": [0.0]},
    })
    code = cli.run("solve", cfg, str(tmp_path / "out"))
    assert code == 1
    assert "/problem/T" in capsys.readouterr().err


def test_bad_expression_reports_pointer(tmp_path, capsys):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "problem": {"mode": "cov", "n": 1, "T": 1.0, "psi": "z1 +", "L": "u1^2/2"},
        "solve": {"z": [0.0]},
    })
    assert cli.run("solve", cfg, str(tmp_path / "out")) == 1
    assert "/problem/psi" in capsys.readouterr().err


def test_cov_command_on_general_problem_is_config_error(tmp_path, capsys):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "problem": {"builtin": "affine2d"},
        "omega": {},
    })
    assert cli.run("omega", cfg, str(tmp_path / "out")) == 1
    assert "/problem/mode" in capsys.readouterr().err


def test_solve_and_sens_outputs(tmp_path):
    cfg = _write_config(tmp_path, COV2D)
    out1 = tmp_path / "solve"
    assert cli.run("solve", cfg, str(out1)) == 0
    lines = (out1 / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,p1,p2,u1,u2,gamma"
    assert len(lines) == 402
    out2 = tmp_path / "sens"
    assert cli.run("sens", cfg, str(out2)) == 0
    header = (out2 / "sensitivity.csv").read_text().splitlines()[0]
    assert header.startswith("t,xz11,xz12,xz21,xz22,pz11")
    assert "xzz1" in header and "w1" in header


def test_sens_without_direction(tmp_path):
    cfg_payload = dict(COV2D)
    cfg_payload["sens"] = {"z": [0.4, -0.7]}
    cfg = _write_config(tmp_path, cfg_payload)
    out = tmp_path / "out"
    assert cli.run("sens", cfg, str(out)) == 0
    header = (out / "sensitivity.csv").read_text().splitlines()[0]
    assert "xzz" not in header and "w1" not in header
    result = json.loads((out / "result.json").read_text())
    assert "xzz_vv0" not in result["summary"]


def test_omega_and_boxcount(tmp_path):
    cfg = _write_config(tmp_path, COV2D)
    out = tmp_path / "omega"
    assert cli.run("omega", cfg, str(out), plot=True) == 0
    result = json.loads((out / "result.json").read_text())
    assert result["summary"]["zeros"] == 1
    assert result["summary"]["transversal"] == 1
    assert (out / "det_contour.svg").exists()
    svg = (out / "det_contour.svg").read_text()
    assert svg.startswith("<svg") and "circle" in svg
    out2 = tmp_path / "boxcount"
    assert cli.run("boxcount", cfg, str(out2)) == 0
    result2 = json.loads((out2 / "result.json").read_text())
    assert result2["summary"]["saturated"] is True
    assert result2["summary"]["counts"] == [1, 1, 1]


def test_perturb_command(tmp_path):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "seed": 0,
        "problem": {"builtin": "bench1d_quartic"},
        "perturb": {"trials": 10, "magnitude": 0.01},
    })
    out = tmp_path / "out"
    assert cli.run("perturb", cfg, str(out)) == 0
    result = json.loads((out / "result.json").read_text())
    assert result["summary"]["fraction_restored"] >= 0.95
    assert result["summary"]["control_persists"] is True
    lines = (out / "trials.csv").read_text().splitlines()
    assert lines[0] == "trial,n_zeros,n_nontransversal,all_transversal"
    assert len(lines) == 11


def test_hmodel_table(tmp_path):
    cfg = _write_config(tmp_path, COV2D)
    out = tmp_path / "out"
    assert cli.run("hmodel", cfg, str(out)) == 0
    lines = (out / "hmodel.csv").read_text().splitlines()
    assert lines[0].startswith("p1,p2,H,DH1,DH2,D2H11")
    row = dict(zip(lines[0].split(","), lines[1].split(",")))
    p = np.array([float(row["p1"]), float(row["p2"])])
    assert float(row["H"]) == pytest.approx(-0.5 * float(p @ p), rel=1e-12)


def test_rerun_byte_identical_csv(tmp_path):
    cfg = _write_config(tmp_path, BENCH)
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.run("scan", cfg, str(out1)) == 0
    assert cli.run("scan", cfg, str(out2)) == 0
    assert (out1 / "candidates.csv").read_bytes() == (out2 / "candidates.csv").read_bytes()


def test_rerun_byte_identical_with_randomness(tmp_path):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "seed": 7,
        "problem": {"builtin": "bench1d_quartic"},
        "perturb": {"trials": 6, "magnitude": 0.01},
    })
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.run("perturb", cfg, str(out1)) == 0
    assert cli.run("perturb", cfg, str(out2), threads=3) == 0
    assert (out1 / "trials.csv").read_bytes() == (out2 / "trials.csv").read_bytes()


def test_explicit_problem_block(tmp_path):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "problem": {
            "mode": "general", "n": 2, "m": 2, "T": 1.0,
            "psi": "cos(z1) + 0.5*sin(z1+z2)",
            "L": "(u1^2+u2^2)/2 + 0.1*(x1^2+x2^2)",
            "f0": ["x2", "-x1"],
            "f": [["1", "0"], ["0", "1"]],
        },
        "solve": {"z": [0.5, -0.3]},
    })
    out = tmp_path / "out"
    assert cli.run("solve", cfg, str(out)) == 0
    result = json.loads((out / "result.json").read_text())
    assert result["summary"]["cost"] == pytest.approx(1.1221455496, abs=1e-6)


def test_kappa_command_with_explicit_points(tmp_path):
    cfg = _write_config(tmp_path, {
        "schema": 1,
        "problem": {"builtin": "bench1d"},
        "kappa": {"z": [[0.0], [0.5]]},
    })
    out = tmp_path / "out"
    assert cli.run("kappa", cfg, str(out)) == 0
    result = json.loads((out / "result.json").read_text())
    ks = result["summary"]["kappa"]
    assert ks[0] == pytest.approx(-1.0, abs=1e-6)
    assert result["summary"]["verdict"][0] == "excluded_if_minimizing"
    lines = (out / "kappa.csv").read_text().splitlines()
    assert lines[0] == "z1,det,sigma_min,v1,kappa"
    assert len(lines) == 3


def test_backend_env_override(tmp_path, monkeypatch):
    import conjpt
    from conjpt._backend import default_backend, resolve_backend

    monkeypatch.setenv("CONJPT_BACKEND", "python")
    assert default_backend() == "python"
    assert resolve_backend(None, True) == "python"
    monkeypatch.setenv("CONJPT_BACKEND", "bogus")
    with pytest.raises(ValueError):
        default_backend()
    monkeypatch.delenv("CONJPT_BACKEND")
    if "compiled" in conjpt.available_backends():
        assert default_backend() == "compiled"
        with pytest.raises(ValueError):
            resolve_backend("compiled", False)  # callback-backed problem
        assert resolve_backend(None, False) == "python"


def test_console_entry_point(tmp_path):
    cfg = _write_config(tmp_path, BENCH)
    proc = subprocess.run(
        [sys.executable, "-m", "conjpt.cli", "solve", "--config", cfg,
         "--out", str(tmp_path / "out")],
        capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "out" / "result.json").exists()
