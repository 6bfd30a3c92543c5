import csv
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gpff import cli
from gpff.errors import StabilityError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
EXAMPLE = CONFIGS / "example.toml"
PERIODIC = CONFIGS / "periodic.toml"


def run(*args):
    return cli.main([str(a) for a in args])


def variant(tmp_path, name, *replacements, source=EXAMPLE):
    text = source.read_text()
    for old, new in replacements:
        assert old in text
        text = text.replace(old, new)
    path = tmp_path / name
    path.write_text(text)
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture(scope="module")
def evaluated(tmp_path_factory):
    out = tmp_path_factory.mktemp("eval")
    t0 = time.perf_counter()
    code = run("evaluate", "--config", EXAMPLE, "--out-dir", out)
    return out, code, time.perf_counter() - t0


def test_ilc_writes_one_row_per_trial(tmp_path, capsys):
    assert run("ilc", "--config", EXAMPLE, "--out-dir", tmp_path, "--position", "0.3") == 0
    table = rows(tmp_path / "ilc_session.csv")
    assert table[0][:3] == ["j", "error_norm", "criterion"]
    assert len(table) == 1 + 21
    assert "acc_0" in capsys.readouterr().out
    first = (tmp_path / "ilc_session.csv").read_bytes()
    assert run("ilc", "--config", EXAMPLE, "--out-dir", tmp_path, "--position", "0.3") == 0
    assert (tmp_path / "ilc_session.csv").read_bytes() == first


def test_missing_config_names_the_path(tmp_path, capsys):
    missing = tmp_path / "nope.toml"
    assert run("ilc", "--config", missing) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_key_fails_before_writing(tmp_path, capsys):
    cfg = variant(tmp_path, "c.toml", ("[gp]\n", "[gp]\nlenghtscale = 2.0\n"))
    out = tmp_path / "out"
    assert run("evaluate", "--config", cfg, "--out-dir", out) == 2
    assert "gp.lenghtscale" in capsys.readouterr().err
    assert not out.exists()


def test_syntax_error_reports_the_line(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("seed = 0\n[plant\nkind = 'spatial_mass'\n")
    assert run("fit", "--config", bad, "--out-dir", tmp_path / "o") == 2
    assert "line 2" in capsys.readouterr().err


def test_out_of_domain_position_is_a_config_error(tmp_path):
    assert run("ilc", "--config", EXAMPLE, "--out-dir", tmp_path, "--position", "1.5") == 2


def test_singular_update_is_a_numerical_failure(tmp_path, capsys):
    cfg = variant(tmp_path, "s.toml", ('basis = ["acc"]', 'basis = ["acc", "acc"]'), ("w_f = 1e-8", "w_f = 0.0"))
    assert run("ilc", "--config", cfg, "--out-dir", tmp_path / "o") == 3
    assert "cond" in capsys.readouterr().err


def test_stability_failure_exit_code(tmp_path, monkeypatch, capsys):
    # the auto-tuned controller keeps every configurable plant stable, so inject the failure
    def unstable(plan):
        raise StabilityError("closed loop unstable at position [0.5]")

    monkeypatch.setattr(cli, "collect_training_data", unstable)
    assert run("collect", "--config", EXAMPLE, "--out-dir", tmp_path) == 4
    assert "unstable" in capsys.readouterr().err


def test_fit_outputs(tmp_path):
    assert run("fit", "--config", EXAMPLE, "--out-dir", tmp_path) == 0
    models = sorted(p.name for p in tmp_path.glob("model_*.json"))
    assert models == ["model_acc_0.json"]
    grid = np.loadtxt(tmp_path / "grid_acc_0.csv", delimiter=",", skiprows=1)
    assert grid.shape == (101, 3)
    assert grid[0, 0] == 0.0 and grid[-1, 0] == 1.0
    assert np.all(grid[:, 2] >= 0)
    first = (tmp_path / "model_acc_0.json").read_bytes()
    assert run("fit", "--config", EXAMPLE, "--out-dir", tmp_path, "--stage", "fit") == 0
    assert (tmp_path / "model_acc_0.json").read_bytes() == first


def test_periodic_config_fits_one_model_per_parameter(tmp_path):
    assert run("fit", "--config", PERIODIC, "--out-dir", tmp_path) == 0
    names = sorted(p.stem[len("model_"):] for p in tmp_path.glob("model_*.json"))
    assert names == sorted(["vel_0", "acc_0", "vel_1", "acc_1", "coulomb_1"])
    grid = rows(tmp_path / "grid_acc_1.csv")
    assert grid[0] == ["rho_0", "rho_1", "mean", "variance"]
    assert len(grid) == 1 + 41 * 41


def test_evaluate_table(evaluated, capsys):
    out, code, elapsed = evaluated
    assert code == 0
    assert elapsed < 60
    table = rows(out / "summary.csv")
    assert table[0] == ["rho_0", "method", "error_2norm", "max_abs_error"]
    assert len(table) == 1 + 6 * 3
    assert {r[1] for r in table[1:]} == {"center", "gp", "local_ilc"}
    report = json.loads((out / "report.json").read_text())
    assert report["schema_version"] == 1
    ts = rows(out / "timeseries.csv")
    assert len(ts[0]) == 2 + 6 * 3


def test_method_subset_omits_local_learning(tmp_path):
    assert run("evaluate", "--config", EXAMPLE, "--out-dir", tmp_path, "--methods", "center,gp") == 0
    methods = {r[1] for r in rows(tmp_path / "summary.csv")[1:]}
    assert methods == {"center", "gp"}
    assert run("evaluate", "--config", EXAMPLE, "--out-dir", tmp_path, "--methods", "center,oracle") == 2


def test_cached_rerun_is_byte_identical(evaluated, tmp_path):
    out, _, _ = evaluated
    before = {n: (out / n).read_bytes() for n in ("summary.csv", "report.json", "training.csv")}
    t0 = time.perf_counter()
    assert run("evaluate", "--config", EXAMPLE, "--out-dir", out) == 0
    for name, data in before.items():
        assert (out / name).read_bytes() == data
    fresh = tmp_path / "fresh"
    assert run("evaluate", "--config", EXAMPLE, "--out-dir", fresh) == 0
    for name, data in before.items():
        assert (fresh / name).read_bytes() == data
    assert time.perf_counter() - t0 < 60


def test_stage_flag_forces_recomputation(tmp_path):
    assert run("collect", "--config", EXAMPLE, "--out-dir", tmp_path) == 0
    training = tmp_path / "training.csv"
    # corrupt the cached observations: a plain rerun keeps them, --stage collect rebuilds them
    table = rows(training)
    original = training.read_bytes()
    table[1][-1] = "123.0"
    with open(training, "w", newline="") as fh:
        csv.writer(fh).writerows(table)
    assert run("fit", "--config", EXAMPLE, "--out-dir", tmp_path) == 0
    model = json.loads((tmp_path / "model_acc_0.json").read_text())
    assert 123.0 in model["training"]["values"]
    assert run("fit", "--config", EXAMPLE, "--out-dir", tmp_path, "--stage", "collect") == 0
    assert training.read_bytes() == original


def test_config_change_invalidates_cache(tmp_path):
    assert run("collect", "--config", EXAMPLE, "--out-dir", tmp_path) == 0
    first = (tmp_path / "training.csv").read_bytes()
    assert run("collect", "--config", EXAMPLE, "--out-dir", tmp_path, "--seed", "7") == 0
    assert (tmp_path / "training.csv").read_bytes() != first


def test_training_csv_layout(tmp_path):
    assert run("collect", "--config", EXAMPLE, "--out-dir", tmp_path) == 0
    table = rows(tmp_path / "training.csv")
    assert table[0] == ["rho_0", "acc_0"]
    assert [float(r[0]) for r in table[1:]] == [0.05, 0.35, 0.65, 0.95]
    masses = np.array([float(r[1]) for r in table[1:]])
    truth = 1 - 2 * (0.5 - np.array([0.05, 0.35, 0.65, 0.95])) ** 2
    np.testing.assert_allclose(masses, truth, rtol=0.02)


def test_predict_and_simulate_outputs(tmp_path):
    assert run("predict", "--config", EXAMPLE, "--out-dir", tmp_path) == 0
    table = rows(tmp_path / "predictions.csv")
    assert table[0] == ["rho_0", "acc_0_mean", "acc_0_variance"]
    assert len(table) == 1 + 6
    assert run("simulate", "--config", EXAMPLE, "--out-dir", tmp_path, "--position", "0.2") == 0
    sim = rows(tmp_path / "simulate.csv")
    assert sim[0] == ["k", "t", "r0", "f0", "y0", "e0", "u0"]
    assert all(float(r[3]) == 0.0 for r in sim[1:])


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "gpff", "simulate", "--config", str(EXAMPLE), "--out-dir", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "|e|_2" in proc.stdout
    help_text = subprocess.run([sys.executable, "-m", "gpff", "--help"], capture_output=True, text=True).stdout
    for command in cli.COMMANDS:
        assert command in help_text
