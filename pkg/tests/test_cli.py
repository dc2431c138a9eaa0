import csv
import json
from pathlib import Path

import numpy as np
import pytest

import kec
from kec import cli, config, macro

SCEN = Path(kec.__file__).parent / "scenarios"
SMALL_KINETIC = ["grid.x_max=60.0", "grid.dx=0.2", "time.T=2.0", "time.stride=5", "time.snapshots=[0.0, 2.0]",
                 "uncertainty.order=2"]


def run(cmd, scenario, out, *extra):
    return cli.main([cmd, "--config", str(SCEN / scenario), "--out-dir", str(out), *extra])


def read_csv(path):
    with open(path) as fh:
        header = fh.readline()
        rows = list(csv.DictReader(fh))
    return header, rows


def _sets(items):
    return [a for s in items for a in ("--set", s)]


def test_all_scenarios_validate():
    for path in sorted(SCEN.glob("*.toml")):
        cfg = config.load_config(path)
        assert len(cfg.sha256) == 64


def test_unknown_key_is_config_error(tmp_path):
    bad = tmp_path / "bad.toml"
    bad.write_text('[model]\nkind = "macro"\n[contact]\nmu = 0.5\nsigmaa = 0.1\n')
    assert cli.main(["macro", "--config", str(bad), "--out-dir", str(tmp_path)]) == cli.EXIT_CONFIG
    with pytest.raises(config.ConfigError, match="sigmaa"):
        config.load_config(bad)


@pytest.mark.parametrize("override", ["contact.mu=-1", "solver.scheme='upwind'", "nosuch.key=1", "bare",
                                      "convergence.M_ref=2"])
def test_bad_overrides_are_config_errors(tmp_path, override):
    assert run("sg-convergence", "sg_convergence.toml", tmp_path, "--set", override) == cli.EXIT_CONFIG


def test_missing_config_file(tmp_path):
    assert cli.main(["macro", "--config", str(tmp_path / "none.toml")]) == cli.EXIT_CONFIG


def test_parse_override_literals():
    assert config.parse_override("time.T=2.5") == ("time.T", 2.5)
    assert config.parse_override("control.selective=sqrtx") == ("control.selective", "sqrtx")
    assert config.parse_override("closure.taus=[0.1, 0.01]") == ("closure.taus", [0.1, 0.01])


def test_macro_outputs_and_header(tmp_path):
    assert run("macro", "test2.toml", tmp_path, "--assert") == cli.EXIT_OK
    header, rows = read_csv(tmp_path / "macro.csv")
    sha = config.load_config(SCEN / "test2.toml").sha256
    assert header.strip() == f"# kec {kec.__version__} config_sha256={sha}"
    total = [sum(float(r[k]) for k in ("rho_S", "rho_E", "rho_I", "rho_R")) for r in rows]
    assert max(abs(t - 1.0) for t in total) < 1e-10
    assert (tmp_path / "macro_atoms.csv").exists()


def test_macro_p0_equals_deterministic(tmp_path):
    sets = ["uncertainty.p=0.0", "uncertainty.order=0"]
    assert run("macro", "test2.toml", tmp_path, *_sets(sets)) == 0
    _, rows = read_csv(tmp_path / "macro.csv")
    cfg = config.load_config(SCEN / "test2.toml")
    lam = cfg.contact.lam
    _, Y = macro.rk4_integrate(cli._macro_initial(cfg).vector(), cfg.epi, (lam + 1) / lam, dt=cfg.dt, T=cfg.T,
                               stride=cfg.stride)
    np.testing.assert_array_equal([float(r["rho_I"]) for r in rows], Y[:, 2])


def test_runs_are_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("kinetic", "test1_mixed.toml", tmp_path / d, *_sets(SMALL_KINETIC)) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "timeseries.csv" in files and "snapshot_t2.csv" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_kinetic_jobs_do_not_change_output(tmp_path):
    assert run("kinetic", "test1_mixed.toml", tmp_path / "a", *_sets(SMALL_KINETIC)) == 0
    assert run("kinetic", "test1_mixed.toml", tmp_path / "b", "--jobs", "4", *_sets(SMALL_KINETIC)) == 0
    assert (tmp_path / "a" / "timeseries.csv").read_bytes() == (tmp_path / "b" / "timeseries.csv").read_bytes()


def test_kinetic_assert_mass(tmp_path):
    assert run("kinetic", "test1_slim.toml", tmp_path, "--assert", *_sets(SMALL_KINETIC)) == 0
    _, rows = read_csv(tmp_path / "timeseries.csv")
    assert {r["J"] for r in rows} >= {"S", "E", "I", "R"}


def test_equilibrium_command(tmp_path):
    assert run("equilibrium", "equilibrium.toml", tmp_path, "--assert", "--set", "equilibrium.deltas=[-1.0, 1.0]") == 0
    _, rows = read_csv(tmp_path / "equilibrium_summary.csv")
    assert len(rows) == 2


def test_failed_check_exits_4(tmp_path):
    # the algebraic tail is not yet resolved on a short domain
    sets = ["grid.x_max=200.0", "grid.dx=0.05", "equilibrium.deltas=[-1.0]"]
    assert run("equilibrium", "equilibrium.toml", tmp_path, "--assert", *_sets(sets)) == cli.EXIT_ASSERT
    assert run("equilibrium", "equilibrium.toml", tmp_path, *_sets(sets)) == cli.EXIT_OK


def test_sg_convergence_table(tmp_path):
    sets = ["grid.x_max=60.0", "grid.dx=0.2", "time.T=0.3", "convergence.M_list=[1, 2, 4]", "convergence.M_ref=8"]
    assert run("sg-convergence", "sg_convergence.toml", tmp_path, "--assert", *_sets(sets)) == cli.EXIT_OK
    _, rows = read_csv(tmp_path / "convergence.csv")
    assert [int(r["M"]) for r in rows] == [1, 2, 4]


def test_damping_sweep(tmp_path):
    sets = ["grid.x_max=100.0", "grid.dx=0.1", "time.T=0.5"]
    assert run("kinetic", "test3_damping.toml", tmp_path, "--assert", *_sets(sets)) == 0
    _, rows = read_csv(tmp_path / "damping.csv")
    assert {r["selective"] for r in rows} == {"off", "uniform", "sqrtx"}


def test_closure_check_short(tmp_path):
    sets = ["time.T=2.0", "grid.x_max=60.0"]
    assert run("closure-check", "test2.toml", tmp_path, *_sets(sets)) == 0
    _, rows = read_csv(tmp_path / "closure.csv")
    assert [float(r["tau"]) for r in rows] == [0.1, 0.001]
    bad = sets + ["closure.macro_dt=0.03"]
    assert run("closure-check", "test2.toml", tmp_path, *_sets(bad)) == cli.EXIT_CONFIG


def test_calibrate_workflow(tmp_path):
    assert run("calibrate", "synthetic.toml", tmp_path, "--stage", "targets") == cli.EXIT_CONFIG
    assert run("calibrate", "synthetic.toml", tmp_path, "--stage", "pre", "--assert") == 0
    doc = json.loads((tmp_path / "fit.json").read_text())
    assert doc["config_sha256"] == config.load_config(SCEN / "synthetic.toml").sha256
    assert doc["fit"]["beta_hat"] == pytest.approx(0.02, rel=0.05)
    assert run("calibrate", "synthetic.toml", tmp_path, "--stage", "targets") == 0
    _, rows = read_csv(tmp_path / "targets_uniform.csv")
    assert list(rows[0]) == ["window_start", "x_T", "cost_total", "cost_S", "cost_E", "cost_R"]
    np.testing.assert_allclose([float(r["x_T"]) for r in rows], 6.0, rtol=0.05)
    assert run("calibrate", "synthetic.toml", tmp_path, "--stage", "retro") == 0
    _, rows = read_csv(tmp_path / "retro_peaks.csv")
    uni = [r for r in rows if r["fitted_with"] == "uniform"]
    assert [float(r["p"]) for r in uni] == [0.0, 0.5, 1.0]
    assert all(float(r["ratio"]) < 1.0 for r in uni)


def test_calibrate_missing_data(tmp_path):
    assert run("calibrate", "synthetic.toml", tmp_path, "--stage", "pre", "--data",
               str(tmp_path / "nope.csv")) == cli.EXIT_CONFIG


def test_jobs_must_be_positive(tmp_path):
    assert run("macro", "test2.toml", tmp_path, "--jobs", "0") == cli.EXIT_CONFIG


def test_tail_exponent():
    assert cli.tail_exponent(5.0, -1.0) == -7.0


@pytest.mark.slow
def test_control_lowers_infected_peak(tmp_path):
    peaks = {}
    for name, sets in {"off": ["control.selective='off'"], "nu100": [], "nu1000": ["control.nu=1000.0"]}.items():
        assert run("kinetic", "test3_seir.toml", tmp_path / name, *_sets(sets)) == 0
        _, rows = read_csv(tmp_path / name / "timeseries.csv")
        peaks[name] = max(float(r["value"]) for r in rows if r["J"] == "I" and r["stat"] == "mean_rho")
    assert peaks["nu100"] < peaks["off"] and peaks["nu1000"] < peaks["off"]


def test_calibrate_data_directory(tmp_path):
    cfg = tmp_path / "italy.toml"
    cfg.write_text((SCEN / "test4_italy.toml").read_text())
    data = tmp_path / "csse"
    data.mkdir()
    head = "Province/State,Country/Region,Lat,Long," + ",".join(
        f"{m}/{d}/20" for m, d in [(2, k) for k in range(20, 30)] + [(3, k) for k in range(1, 12)])
    names = config.load_config(cfg).section("calibration")
    for key, scale in (("data", 3.0), ("recovered", 1.0), ("deaths", 0.5)):
        vals = ",".join(str(int(scale * 1.3 ** k)) for k in range(21))
        (data / names[key]).write_text(f"{head}\n,Italy,41.8,12.5,{vals}\n")
    assert cli.main(["calibrate", "--config", str(cfg), "--out-dir", str(tmp_path / "o"), "--stage", "pre",
                     "--data", str(data)]) == 0
    assert (tmp_path / "o" / "fit.json").exists()
