"""End-to-end checks of the command line driver (in-process)."""

import numpy as np
import pytest
import yaml

from flapkit import cli, csvio, multibody, neuralnet


def run_cli(args, capsys):
    rc = cli.main(args)
    captured = capsys.readouterr()
    return rc, captured.out, captured.err


def write_config(path, data):
    data = {"format": 1, **data}
    path.write_text(yaml.safe_dump(data))
    return str(path)


TRAIN_CFG = {
    "model": "planar-flapper",
    "simulate": {"duration": 0.02, "stride": 20},
    "filter": {"hidden": [4, 4], "epochs": 2},
}


def test_simulate_writes_trajectory_and_samples(tmp_path, capsys):
    out = tmp_path / "run"
    rc, stdout, _ = run_cli(["simulate", "--model", "planar-flapper",
                             "--duration", "0.05", "--out", str(out)], capsys)
    assert rc == 0
    assert "500 rows" in stdout and "5 samples" in stdout

    header, arr = csvio.read_csv(out / "trajectory.csv")
    n_q = 5
    assert header == list(csvio.trajectory_header(n_q))
    assert arr.shape == (500, 1 + 2 * n_q)
    assert np.allclose(np.diff(arr[:, 0]), 1e-4)

    header, arr = csvio.read_csv(out / "samples.csv")
    assert header == list(csvio.samples_header(n_q))
    assert arr.shape == (5, 1 + 3 * n_q)
    assert np.isfinite(arr).all()


def test_simulate_zero_duration_writes_headers_only(tmp_path, capsys):
    out = tmp_path / "empty"
    rc, _, _ = run_cli(["simulate", "--model", "pendulum2", "--duration", "0",
                        "--dt", "1e-4", "--out", str(out)], capsys)
    assert rc == 0
    header, arr = csvio.read_csv(out / "trajectory.csv")
    assert header == list(csvio.trajectory_header(2))
    assert arr.shape == (0, 5)


def test_missing_model_exits_input_error(tmp_path, capsys):
    rc, _, stderr = run_cli(["simulate", "--model", "/no/such/model.mdl",
                             "--out", str(tmp_path / "x")], capsys)
    assert rc == 2
    assert "/no/such/model.mdl" in stderr


def test_divergent_run_exits_numeric_error(tmp_path, capsys):
    cfg = write_config(tmp_path / "div.yaml", {
        "model": "pendulum2",
        "simulate": {"duration": 0.01, "qdot0": [1.0e154, 0.0]},
    })
    rc, _, stderr = run_cli(["simulate", "--config", cfg,
                             "--out", str(tmp_path / "x")], capsys)
    assert rc == 3
    assert "numerical failure" in stderr and "around step" in stderr


def test_flag_overrides_config_file(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", {
        "model": "pendulum2",
        "simulate": {"duration": 0.05},
    })
    out = tmp_path / "run"
    rc, stdout, _ = run_cli(["simulate", "--config", cfg,
                             "--duration", "0.01", "--out", str(out)], capsys)
    assert rc == 0
    _, arr = csvio.read_csv(out / "trajectory.csv")
    assert arr.shape[0] == 100


def test_rejects_bad_config(tmp_path, capsys):
    unknown = write_config(tmp_path / "a.yaml", {"simulate": {"dtt": 1e-4}})
    rc, _, stderr = run_cli(["simulate", "--config", unknown,
                             "--out", str(tmp_path / "x")], capsys)
    assert rc == 2 and "dtt" in stderr

    wrong_version = str(tmp_path / "b.yaml")
    (tmp_path / "b.yaml").write_text("format: 99\nmodel: pendulum2\n")
    rc, _, stderr = run_cli(["simulate", "--config", wrong_version,
                             "--out", str(tmp_path / "x")], capsys)
    assert rc == 2 and "format" in stderr


def test_train_writes_trace_forces_checkpoint(tmp_path, capsys):
    cfg = write_config(tmp_path / "t.yaml", TRAIN_CFG)
    out = tmp_path / "fit"
    rc, stdout, _ = run_cli(["train", "--config", cfg, "--out", str(out)],
                            capsys)
    assert rc == 0
    assert "final normalized MSE" in stdout

    header, trace = csvio.read_csv(out / "mse_trace.csv")
    assert header == ["step", "innovation_mse", "max_var"]
    assert trace.shape == (20, 3)                       # 10 samples x 2 sweeps
    assert np.array_equal(trace[:, 0], np.arange(1, 21))

    header, forces = csvio.read_csv(out / "forces.csv")
    names = multibody.derive_dynamics(
        multibody.load_model("planar-flapper")).q_names
    assert header == (["t"] + [f"a_{n}" for n in names]
                      + [f"pred_{n}" for n in names])
    assert forces.shape == (10, 11)

    spec, w, extras = neuralnet.load_checkpoint(out / "checkpoint.npz")
    assert spec.layer_sizes == (10, 4, 4, 5)
    assert extras["step"] == 20 and extras["epochs_done"] == 2
    assert extras["sqrt_cov"].shape == (spec.n_weights, spec.n_weights)


def test_train_resume_matches_unbroken_run(tmp_path, capsys):
    cfg2 = write_config(tmp_path / "two.yaml", TRAIN_CFG)
    cfg3 = write_config(tmp_path / "three.yaml", {
        **TRAIN_CFG, "filter": {**TRAIN_CFG["filter"], "epochs": 3}})

    full, part = tmp_path / "full", tmp_path / "part"
    assert run_cli(["train", "--config", cfg3, "--out", str(full)], capsys)[0] == 0
    assert run_cli(["train", "--config", cfg2, "--out", str(part)], capsys)[0] == 0
    rc, _, _ = run_cli(["train", "--config", cfg3, "--out", str(part),
                        "--resume", str(part / "checkpoint.npz")], capsys)
    assert rc == 0

    # npz bytes embed zip timestamps, so compare the stored arrays
    a = np.load(full / "checkpoint.npz")
    b = np.load(part / "checkpoint.npz")
    assert sorted(a.files) == sorted(b.files)
    for key in a.files:
        assert np.array_equal(a[key], b[key]), key
    assert (full / "forces.csv").read_bytes() == (part / "forces.csv").read_bytes()


def test_train_rejects_wingless_model(tmp_path, capsys):
    rc, _, stderr = run_cli(["train", "--model", "pendulum2",
                             "--out", str(tmp_path / "x")], capsys)
    assert rc == 2
    assert "no wing surfaces" in stderr


def test_train_rejects_mismatched_sample_file(tmp_path, capsys):
    out = tmp_path / "fit"
    out.mkdir()
    csvio.write_csv(out / "samples.csv", ["t", "bogus"], [[0.0, 1.0]])
    cfg = write_config(tmp_path / "t.yaml", TRAIN_CFG)
    rc, _, stderr = run_cli(["train", "--config", cfg, "--out", str(out)],
                            capsys)
    assert rc == 2
    assert "sample schema" in stderr


def test_bench_reports_both_backends(tmp_path, capsys):
    cfg = write_config(tmp_path / "b.yaml", {
        "model": "pendulum2", "bench": {"iterations": 50}})
    out = tmp_path / "bench"
    rc, stdout, _ = run_cli(["bench", "--config", cfg, "--out", str(out)],
                            capsys)
    assert rc == 0
    assert "value agreement (naive vs tape): ok" in stdout

    header, arr = None, None
    with open(out / "bench.csv") as fh:
        header = fh.readline().strip().split(",")
        rows = [line.strip().split(",") for line in fh]
    assert header == ["term", "backend", "median_us", "p95_us", "iterations"]
    # wingless model has no chord-point block: 3 terms x 2 backends
    assert len(rows) == 6
    assert {(r[0], r[1]) for r in rows} == {
        (t, b) for t in ("D", "C", "G") for b in ("naive", "tape")}
    assert all(float(r[2]) > 0 and int(r[4]) == 50 for r in rows)


def test_validate_passes_on_bundled_models(tmp_path, capsys):
    rc, stdout, _ = run_cli(["validate", "--model", "pendulum2"], capsys)
    assert rc == 0
    assert "6/6 checks passed" in stdout
    assert "[FAIL]" not in stdout


def test_repeat_runs_are_byte_identical(tmp_path, capsys):
    args = ["simulate", "--model", "pendulum2", "--duration", "0.02",
            "--dt", "1e-4"]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out", str(a)], capsys)[0] == 0
    assert run_cli(args + ["--out", str(b)], capsys)[0] == 0
    for name in ("trajectory.csv", "samples.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_symmetric_flap_gives_symmetric_wing_forces(tmp_path, capsys):
    out = tmp_path / "run"
    rc, _, _ = run_cli(["simulate", "--model", "planar-flapper",
                        "--duration", "0.05", "--out", str(out)], capsys)
    assert rc == 0
    _, arr = csvio.read_csv(out / "samples.csv")
    names = multibody.derive_dynamics(
        multibody.load_model("planar-flapper")).q_names
    n_q = len(names)
    left = arr[:, 1 + 2 * n_q + names.index("left_flap")]
    right = arr[:, 1 + 2 * n_q + names.index("right_flap")]
    assert np.abs(left - right).max() <= 1e-9


def test_help_exits_zero(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    assert "simulate" in capsys.readouterr().out
