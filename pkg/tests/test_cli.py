import json
import subprocess
import sys

import pytest

from mcss.cli import MODES, main, parse_config, parse_seeds
from mcss.errors import ConfigurationError

PUT = {"problem": {"builtin": "american-put"}}


def write(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if isinstance(doc, dict) else doc)
    return str(p)


def test_minimal_put_config_fills_defaults():
    cfg = parse_config(PUT)
    assert cfg.params == {"strike": 1.0, "rate": 0.05, "vol": 0.2}
    assert cfg.grids["n_steps"] == 50 and cfg.grids["n_space"] == 60
    assert (cfg.grids["x_min"], cfg.grids["x_max"]) == (-1.2, 1.2)
    assert cfg.seed == 0 and cfg.threads == 1 and cfg.output_dir == "out"


def test_n_space_zero_names_key():
    with pytest.raises(ConfigurationError, match=r"grids\.n_space"):
        parse_config({**PUT, "grids": {"n_space": 0}})


def test_unknown_key_suggestion():
    with pytest.raises(ConfigurationError, match=r"problem\.params\.sigm.*'sigma'"):
        parse_config({"problem": {"builtin": "linear-pide", "params": {"sigm": 0.2}}})
    with pytest.raises(ConfigurationError, match="'grids'"):
        parse_config({**PUT, "grid": {}})
    with pytest.raises(ConfigurationError, match=r"grids\.n_stesp.*'n_steps'"):
        parse_config({**PUT, "grids": {"n_stesp": 10}})
    with pytest.raises(ConfigurationError, match="american-put"):
        parse_config({"problem": {"builtin": "american-pot"}})


def test_parse_error_reports_position(tmp_path):
    path = write(tmp_path, '{"problem":\n  {"builtin": "american-put",}}')
    with pytest.raises(ConfigurationError, match="line 2, column 30"):
        parse_config(path)


def test_seed_ranges():
    assert parse_seeds("1..4") == [1, 2, 3, 4]
    assert parse_seeds("3,5..6") == [3, 5, 6]
    with pytest.raises(ConfigurationError):
        parse_seeds("4..1")


def test_solve_writes_surface_and_summary(tmp_path, capsys):
    cfg = write(tmp_path, PUT)
    out = tmp_path / "o"
    assert main(["solve", "--config", cfg, "--out", str(out), "--emit-gnuplot"]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("value: u(0, x0=0) = 0.060")
    assert (out / "value_surface.csv").exists() and (out / "value_surface.gp").exists()
    head = (out / "value_surface.csv").read_text().splitlines()
    assert head[0] == "t,x,u,control,stop"
    assert len(head[1].split(",")[2].replace("0.", "")) >= 15


def test_cross_validate_refine_rungs(tmp_path):
    cfg = write(tmp_path, {"problem": {"builtin": "affine", "params": {
        "b0": 0.1, "b1": -0.2, "s0": 0.3, "l0": 0.0, "l1": 0.0, "c_y": 0.0}}})
    out = tmp_path / "o"
    assert main(["cross-validate", "--config", cfg, "--out", str(out), "--refine", "3"]) == 0
    rows = (out / "convergence.csv").read_text().splitlines()
    assert rows[0].startswith("n_steps,n_space,dt,dx,err")
    assert [int(r.split(",")[0]) for r in rows[1:]] == [50, 100, 200]


def test_exit_codes(tmp_path, capsys):
    out = str(tmp_path / "o")
    bad = write(tmp_path, {**PUT, "grids": {"n_space": -1}}, "bad.json")
    assert main(["value", "--config", bad]) == 1
    cfl = write(tmp_path, {**PUT, "grids": {"n_steps": 4, "n_space": 120}}, "cfl.json")
    assert main(["value", "--config", cfl, "--out", out]) == 2
    assert "max admissible" in capsys.readouterr().err
    strict = write(tmp_path, {**PUT, "tolerances": {"residual": 1e-9}}, "strict.json")
    assert main(["hjbvi", "--config", strict, "--out", out]) == 3
    assert main(["value", "--out", out]) == 1     # config required outside verify


@pytest.mark.parametrize("mode", MODES)
def test_dry_run_computes_nothing(mode, tmp_path, capsys):
    cfg = write(tmp_path, PUT)
    out = tmp_path / "o"
    assert main([mode, "--config", cfg, "--out", str(out), "--dry-run"]) == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["mode"] == mode
    assert not out.exists()


def test_other_subcommands(tmp_path, capsys):
    cfg = write(tmp_path, {"problem": {"builtin": "linear-pide"}, "simulate": {"n_paths": 50},
                           "dpp": {"rules": 2}, "assumptions": {"sample_count": 200}})
    out = tmp_path / "o"
    for mode, art in [("simulate", "paths.csv"), ("solve-bsde", "bsde_field.csv"),
                      ("solve-rbsde", "rbsde_field.csv"), ("hjbvi", "hjbvi_surface.csv"),
                      ("dpp-check", "dpp_report.json"),
                      ("check-assumptions", "assumptions.json")]:
        assert main([mode, "--config", cfg, "--out", str(out)]) == 0, mode
        assert (out / art).exists()
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6


def test_verify_cli(tmp_path, capsys):
    out = tmp_path / "v"
    assert main(["verify", "--seeds", "1", "--out", str(out)]) == 0
    assert (out / "junit.xml").exists()
    assert "reports ok over 1 seeds" in capsys.readouterr().out


def test_module_entry_and_log_env(tmp_path):
    cfg = write(tmp_path, PUT)
    res = subprocess.run([sys.executable, "-m", "mcss", "value", "--config", cfg, "--dry-run"],
                         capture_output=True, text=True, env={"MCSS_LOG": "debug", "PATH": ""})
    assert res.returncode == 0
    assert json.loads(res.stdout)["problem"] == "american-put"
