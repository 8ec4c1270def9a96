import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from zigzag_lab import experiment
from zigzag_lab.cli import main
from zigzag_lab.config import OUTPUT_DIR_ENV, ConfigError, RunConfig, reference_config
from zigzag_lab.experiment import RESULT_FIELDS, IdentityCheckFailed, csv_header, non_decreasing, run_experiment

SMALL = {"trajectories": 32}


def test_reference_values():
    cfg = reference_config()
    assert cfg.sampler.T == 10 and cfg.sampler.lam == 9 and cfg.sampler.k == 1
    assert (cfg.sampler.gamma1, cfg.sampler.gamma2) == (5.5, 0.0)
    assert cfg.trajectories == 256
    np.testing.assert_array_equal(cfg.mixture.means, [[2.0, 0.0], [-2.0, 0.0]])


@pytest.mark.parametrize("bad", [
    {"sweep": {"axis": "gap", "values": []}},
    {"sweep": {"axis": "temperature", "values": [1]}},
    {"trajectories": 0},
    {"method": "ancestral"},
    {"colour": "red"},
    {"sampler": {"lambda": 12}},
    {"sampler": {"gama1": 1.0}},
    {"model": {"kind": "checkpoint"}},
])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        reference_config(**bad)


def test_yaml_load_and_env_override(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("experiment: x\nsampler: {lambda: 3}\nsweep: {axis: k, values: [1, 2]}\noutput_dir: here\n")
    cfg = RunConfig.load(path, env={})
    assert cfg.sampler.lam == 3 and cfg.sweep_axis == "k" and str(cfg.output_dir) == "here"
    assert str(RunConfig.load(path, env={OUTPUT_DIR_ENV: "/elsewhere"}).output_dir) == "/elsewhere"
    path.write_text("sampler: [1, 2\n")
    with pytest.raises(ConfigError):
        RunConfig.load(path)
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.yaml")


def test_shipped_configs_parse():
    from pathlib import Path

    root = Path(__file__).resolve().parent.parent / "configs"
    axes = {RunConfig.load(p, env={}).sweep_axis for p in root.glob("*.yaml")}
    assert axes == {"gap", "lambda", "k", "s", "eta"}


def test_non_decreasing_rule():
    assert non_decreasing([0.1, 0.2, 0.3], [0.01] * 3)
    assert non_decreasing([0.2, 0.19, 0.3], [0.01] * 3)  # dip within 2 SE
    assert not non_decreasing([0.3, 0.2], [0.01, 0.01])


def test_csv_is_bit_exact_and_ordered(tmp_path):
    cfg = reference_config(output_dir=str(tmp_path / "a"), **SMALL)
    first = run_experiment(cfg)
    second = run_experiment(reference_config(output_dir=str(tmp_path / "b"), **SMALL))
    a, b = first.csv_path.read_bytes(), second.csv_path.read_bytes()
    assert a == b
    rows = list(csv.reader(a.decode().splitlines()))
    assert rows[0] == csv_header("gap") == ["gap"] + RESULT_FIELDS
    assert len(rows) == 1 + len(cfg.sweep_values)
    assert all(np.isfinite(float(v)) for r in rows[1:] for v in r)
    summary = json.loads(first.summary_path.read_text())
    assert set(summary["seconds_per_trajectory"]) == {"0", "1", "2.5", "5.5"}


def test_twelve_significant_digits(tmp_path):
    res = run_experiment(reference_config(**SMALL), write=False)
    cell = res.csv_text().splitlines()[1].split(",")[RESULT_FIELDS.index("measured") + 1]
    assert len(cell.replace(".", "").replace("-", "").lstrip("0").split("e")[0]) <= 12


def test_lambda_zero_row_equals_standard():
    res = run_experiment(reference_config(sweep={"axis": "lambda", "values": [0, 9]}, **SMALL), write=False)
    r0 = res.rows[0]
    assert r0["alignment"] == r0["baseline_alignment"] and r0["gain"] == 0.0
    assert r0["model_calls"] == 10 and res.rows[1]["model_calls"] == 28


def test_zero_gap_within_noise_of_standard():
    res = run_experiment(reference_config(), write=False)
    r0 = res.rows[0]
    assert abs(r0["gain"]) <= 3 * max(r0["gain_se"], 1e-12) + 1e-12


def test_failing_identity_aborts(monkeypatch):
    monkeypatch.setattr(experiment, "IDENTITY_RTOL", -1.0)
    with pytest.raises(IdentityCheckFailed, match="identity"):
        run_experiment(reference_config(**SMALL), write=False)


def test_missing_checkpoint_reports_path(tmp_path):
    cfg = reference_config(model={"kind": "checkpoint", "path": str(tmp_path / "nope.npz")}, **SMALL)
    with pytest.raises(OSError, match="nope.npz"):
        run_experiment(cfg, write=False)


def test_checkpoint_model_runs(tmp_path):
    from zigzag_lab.scorenet import TrainSettings, train_score_net

    cfg = reference_config(**SMALL)
    pts, lab = cfg.mixture.sample(128, np.random.default_rng(0))
    path = train_score_net(pts, lab, cfg.build_schedule(), TrainSettings(steps=5, hidden=16, depth=1)).save(tmp_path / "m.npz")
    res = run_experiment(reference_config(model={"kind": "checkpoint", "path": str(path)}, **SMALL), write=False)
    assert all(r["identity_rel_err"] <= 1e-8 for r in res.rows)


def test_write_failure_has_path_context(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        run_experiment(reference_config(output_dir=str(blocker / "sub"), **SMALL))


# -- CLI -------------------------------------------------------------------------------


def test_cli_verify(capsys):
    assert main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("[PASS]") == 8


def test_cli_sweep_writes_declared_csv(tmp_path, monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)
    cfg = tmp_path / "k.yaml"
    cfg.write_text(f"trajectories: 16\noutput_dir: {tmp_path / 'out'}\nsweep: {{axis: k, values: [1, 3]}}\n")
    assert main(["sweep", "--config", str(cfg)]) == 0
    header = (tmp_path / "out" / "results.csv").read_text().splitlines()[0]
    assert header.split(",") == ["k"] + RESULT_FIELDS


def test_cli_sample_lambda_zero_matches_standard(tmp_path):
    assert main(["sample", "--lambda", "0", "--seed", "3", "--n", "4", "--out-dir", str(tmp_path / "z")]) == 0
    assert main(["sample", "--method", "standard", "--seed", "3", "--n", "4", "--out-dir", str(tmp_path / "s")]) == 0
    assert (tmp_path / "z" / "latents.json").read_bytes() == (tmp_path / "s" / "latents.json").read_bytes()
    assert main(["sample", "--seed", "4", "--n", "4", "--out-dir", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "latents.json").read_bytes() != (tmp_path / "s" / "latents.json").read_bytes()


def test_cli_sample_then_analyze(tmp_path, capsys):
    assert main(["sample", "--n", "4", "--k", "2", "--out-dir", str(tmp_path)]) == 0
    rec = json.loads((tmp_path / "record.json").read_text())
    assert rec["gains"]["identity_rel_err"] <= 1e-8
    capsys.readouterr()
    assert main(["analyze", str(tmp_path / "record.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["zigzag_steps"] == [10, 8, 6, 4, 2] and report["accumulation_inequality_holds"]


def test_cli_env_output_override(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "env"))
    assert main(["sample", "--n", "2"]) == 0
    assert (tmp_path / "env" / "latents.json").exists()


def test_cli_train(tmp_path, capsys):
    out = tmp_path / "m.npz"
    assert main(["train", "--steps", "3", "--samples", "64", "--hidden", "8", "--depth", "1", "--out", str(out)]) == 0
    assert out.exists()
    assert main(["sample", "--checkpoint", str(out), "--n", "2", "--out-dir", str(tmp_path / "s")]) == 0


@pytest.mark.parametrize("argv", [["bogus"], ["sample", "--nope"], ["sweep", "--lambda", "2"], []])
def test_cli_usage_errors(argv, capsys):
    try:
        code = main(argv)
    except SystemExit as exc:
        code = exc.code
    assert code != 0
    assert "usage" in capsys.readouterr().err


def test_cli_bad_values_exit_nonzero(tmp_path, capsys):
    assert main(["sample", "--lambda", "10", "--out-dir", str(tmp_path)]) != 0
    assert main(["sweep", "--config", str(tmp_path / "missing.yaml")]) != 0
    assert main(["analyze", str(tmp_path / "missing.json")]) != 0


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "zigzag_lab", "verify"], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stdout + proc.stderr
