import json

import numpy as np
import pytest

from benchkelly import model as model_mod
from benchkelly.cli import main
from benchkelly.estimate import save_panel, synthesize_panel
from benchkelly.model import validate_model

from conftest import make_scalar_spec


@pytest.fixture()
def workdir(tmp_path):
    """Config + model file for the scalar reference setup."""
    model_mod.save_model(make_scalar_spec(), tmp_path / "model.json")
    config = {
        "model": "model.json",
        "solver": {"steps_per_year": 1008, "residual_tol": 1e-3},
        "simulation": {"n_paths": 400, "steps": 126, "dt": 1 / 252, "seed": 42,
                       "strategy": "optimal", "dump_paths": True},
        "metrics": {"level": 0.95},
        "verify": {"probes": 1500, "sim_paths": 1500, "lattice_times": 2, "lattice_states": 2},
        "output_dir": "out",
    }
    (tmp_path / "config.json").write_text(json.dumps(config))
    return tmp_path


def run(workdir, *argv):
    return main(list(argv))


def test_validate(workdir, capsys):
    code = run(workdir, "validate", "--config", str(workdir / "config.json"),
               "--out", str(workdir / "o"))
    assert code == 0
    assert "model OK" in capsys.readouterr().out


def test_missing_model_file(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"model": "nowhere.json"}))
    code = run(tmp_path, "solve", "--config", str(tmp_path / "c.json"),
               "--out", str(tmp_path / "o"))
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("ERROR CONFIG:")
    assert "nowhere.json" in err


def test_config_requires_exactly_one_source(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({}))
    code = run(tmp_path, "validate", "--config", str(tmp_path / "c.json"),
               "--out", str(tmp_path / "o"))
    assert code == 1


def test_solve_writes_artifacts(workdir):
    out = workdir / "solved"
    code = run(workdir, "solve", "--config", str(workdir / "config.json"), "--out", str(out))
    assert code == 0
    assert (out / "value_coefficients.json").exists()
    summary = json.loads((out / "solve_summary.json").read_text())
    assert summary["residual_quad"] < 1e-3
    manifest = json.loads((out / "manifest.json").read_text())
    assert "value_coefficients.json" in manifest and "solve_summary.json" in manifest


def test_solve_zero_loading_model(tmp_path):
    spec = make_scalar_spec(asset_factor_loading=[[0.0]], bench_factor_loading=[0.0],
                            bench_vol=[0.0])
    model_mod.save_model(spec, tmp_path / "m.json")
    (tmp_path / "c.json").write_text(json.dumps({
        "model": "m.json", "solver": {"steps_per_year": 504}, "output_dir": "out",
    }))
    out = tmp_path / "o"
    assert run(tmp_path, "solve", "--config", str(tmp_path / "c.json"), "--out", str(out)) == 0
    data = json.loads((out / "value_coefficients.json").read_text())
    assert all(v == 0.0 for node in data["quad"] for v in node)
    assert all(v == 0.0 for row in data["lin"] for v in row)


def test_policy_output(workdir, capsys):
    out = workdir / "pol"
    code = run(workdir, "policy", "--config", str(workdir / "config.json"), "--out", str(out))
    assert code == 0
    text = capsys.readouterr().out
    assert "allocation" in text and "kelly_fraction" in text
    payload = json.loads((out / "policy.json").read_text())
    mid = 0.5  # theta = 1
    assert payload["kelly_fraction"] == mid


def test_simulate_and_report(workdir):
    out = workdir / "sim"
    code = run(workdir, "simulate", "--config", str(workdir / "config.json"), "--out", str(out))
    assert code == 0
    assert (out / "terminals.csv").exists() and (out / "paths.bin").exists()
    summary = json.loads((out / "sim_summary.json").read_text())
    assert "criterion_estimate" in summary

    rep_out = workdir / "rep"
    code = run(workdir, "report", "--config", str(workdir / "config.json"),
               "--out", str(rep_out), f"optimal={out / 'paths.bin'}")
    assert code == 0
    table = (rep_out / "report.txt").read_text()
    assert "sharpe" in table and "optimal" in table

    # terminals CSV is accepted as a return stream too
    rep_out2 = workdir / "rep_csv"
    code = run(workdir, "report", "--config", str(workdir / "config.json"),
               "--out", str(rep_out2), f"terminal={out / 'terminals.csv'}")
    assert code == 0
    assert "terminal" in (rep_out2 / "report.txt").read_text()


def test_experiment_route_columns_identical(workdir):
    out = workdir / "exp"
    code = run(workdir, "experiment", "--config", str(workdir / "config.json"),
               "--out", str(out))
    assert code == 0
    rows = (out / "experiment_report.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    i_two = header.index("portfolio-twostep")
    i_dir = header.index("portfolio-direct")
    for row in rows[1:]:
        cells = row.split(",")
        assert cells[i_two] == cells[i_dir]  # byte-identical route columns
    summary = json.loads((out / "experiment_summary.json").read_text())
    assert summary["route_metric_gap"] <= 1e-12


def test_experiment_determinism(workdir):
    out1, out2 = workdir / "d1", workdir / "d2"
    for out in (out1, out2):
        assert run(workdir, "experiment", "--config", str(workdir / "config.json"),
                   "--out", str(out)) == 0
    for name in ("experiment_report.csv", "experiment_report.txt",
                 "experiment_summary.json", "manifest.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_experiment_single_path_smoke(workdir, capsys):
    config = json.loads((workdir / "config.json").read_text())
    config["simulation"].update({"n_paths": 1, "steps": 60})
    (workdir / "tiny.json").write_text(json.dumps(config))
    out = workdir / "tiny_out"
    code = run(workdir, "experiment", "--config", str(workdir / "tiny.json"),
               "--out", str(out))
    assert code == 0
    assert "degenerate" in capsys.readouterr().out


def test_experiment_theta_zero_kelly_columns_coincide(workdir):
    config = json.loads((workdir / "config.json").read_text())
    config["theta"] = 0.0
    (workdir / "kelly.json").write_text(json.dumps(config))
    out = workdir / "kelly_out"
    code = run(workdir, "experiment", "--config", str(workdir / "kelly.json"),
               "--out", str(out))
    assert code == 0
    rows = (out / "experiment_report.csv").read_text().strip().splitlines()
    header = rows[0].split(",")
    i_dir = header.index("portfolio-direct")
    i_kelly = header.index("kelly")
    for row in rows[1:]:
        cells = row.split(",")
        assert cells[i_dir] == cells[i_kelly]


def test_verify_all_pass(workdir):
    out = workdir / "ver"
    code = run(workdir, "verify", "--config", str(workdir / "config.json"), "--out", str(out))
    assert code == 0
    rows = json.loads((out / "verify_report.json").read_text())
    assert all(r["status"] == "PASS" for r in rows)


def test_verify_negative_control(workdir, capsys):
    out = workdir / "verneg"
    code = run(workdir, "verify", "--config", str(workdir / "config.json"),
               "--out", str(out), "--inject-corruption")
    assert code == 2
    assert "ERROR VERIFY" in capsys.readouterr().err
    rows = json.loads((out / "verify_report.json").read_text())
    failed = {r["invariant"] for r in rows if r["status"] == "FAIL"}
    assert "backward_residuals" in failed
    assert "saddle_probes" in failed


def test_verify_kelly_mode_skips_game_checks(workdir):
    config = json.loads((workdir / "config.json").read_text())
    config["theta"] = 0.0
    (workdir / "k.json").write_text(json.dumps(config))
    out = workdir / "verk"
    code = run(workdir, "verify", "--config", str(workdir / "k.json"), "--out", str(out))
    assert code == 0
    rows = {r["invariant"]: r for r in json.loads((out / "verify_report.json").read_text())}
    assert rows["saddle_probes"]["status"] == "SKIP"
    assert "Kelly mode" in rows["saddle_probes"]["detail"]


def test_estimate_command(tmp_path):
    vm = validate_model(make_scalar_spec())
    # a d=2 generator so the joint covariance is well-posed
    gen = model_mod.ModelSpec.constant(
        n=1, m=1, d=2, horizon_years=1.0, theta=1.0, x0=[0.0],
        asset_drift=[0.3], asset_factor_loading=[[0.4]], asset_vol=[[0.1, 0.0]],
        factor_drift=[0.02], factor_mean_reversion=[[-0.8]], factor_vol=[[0.0, 0.04]],
        bench_drift=0.3, bench_factor_loading=[0.4], bench_vol=[0.1, 0.0],
    )
    panel = synthesize_panel(validate_model(gen), years=4.0, weights=np.array([1.0]), seed=3)
    save_panel(panel, tmp_path / "panel.csv")
    config = {
        "estimation": {"panel": "panel.csv", "bench_weights": [1.0], "dt": 1 / 252},
        "theta": 1.0,
        "horizon_years": 1.0,
        "solver": {"steps_per_year": 504},
        "output_dir": "out",
    }
    (tmp_path / "c.json").write_text(json.dumps(config))
    out = tmp_path / "est"
    code = run(tmp_path, "estimate", "--config", str(tmp_path / "c.json"), "--out", str(out))
    assert code == 0
    fitted = model_mod.load_model(out / "model.json")
    assert fitted.m == 1 and fitted.n == 1 and fitted.d == 3
    report = json.loads((out / "estimation_report.json").read_text())
    assert report["rows"] == panel.rows

    # the estimated model drives the full pipeline
    code = run(tmp_path, "verify", "--config", str(tmp_path / "c.json"),
               "--out", str(tmp_path / "ver"))
    assert code == 0


def test_report_needs_inputs(workdir):
    code = run(workdir, "report", "--config", str(workdir / "config.json"),
               "--out", str(workdir / "r"))
    assert code == 1


def test_simulate_flag_overrides(workdir):
    out = workdir / "flags"
    code = run(workdir, "simulate", "--config", str(workdir / "config.json"),
               "--out", str(out), "--paths", "50", "--steps", "30",
               "--strategy", "kelly", "--antithetic")
    assert code == 0
    summary = json.loads((out / "sim_summary.json").read_text())
    assert summary["n_paths"] == 50 and summary["steps"] == 30
    assert summary["strategy"] == "kelly"
    rows = (out / "terminals.csv").read_text().strip().splitlines()
    assert len(rows) == 51  # header + one row per path


def test_seed_override_changes_results(workdir):
    out1, out2 = workdir / "s1", workdir / "s2"
    run(workdir, "simulate", "--config", str(workdir / "config.json"),
        "--out", str(out1), "--seed", "1")
    run(workdir, "simulate", "--config", str(workdir / "config.json"),
        "--out", str(out2), "--seed", "2")
    t1 = (out1 / "terminals.csv").read_text()
    t2 = (out2 / "terminals.csv").read_text()
    assert t1 != t2
