import json
import subprocess
import sys

import numpy as np
import pytest

from shardbart import cli
from shardbart.errors import NumericalError, ParseError
from shardbart.io import (DegenerateColumnWarning, dump_model, load_dataset, load_model,
                          read_numeric_csv, write_dataset)
from shardbart.sharding import SbtConfig, sbt_fit, sbt_predict
from shardbart.bart import BartConfig


def _write(path, text):
    path.write_text(text)
    return path


@pytest.fixture
def small_csv(tmp_path):
    rng = np.random.default_rng(0)
    X = rng.uniform(-2, 3, size=(50, 2))
    y = X[:, 0] ** 2 + X[:, 1]
    path = tmp_path / "train.csv"
    write_dataset(path, X, y, ["a", "b"], "y")
    return path


def test_load_hand_written_csv(tmp_path):
    path = _write(tmp_path / "d.csv", "x1,x2,y\n0,10,1.5\n2,20,2.5\n4,15,-1\n")
    data = load_dataset(path)
    assert data.columns == ("x1", "x2") and data.y_column == "y"
    assert np.array_equal(data.X, [[0, 0], [0.5, 1], [1, 0.5]])
    assert np.array_equal(data.y, [1.5, 2.5, -1])
    other = load_dataset(path, y_col="x1")
    assert other.columns == ("x2", "y") and np.array_equal(other.y, [0, 2, 4])
    assert np.allclose(data.rescale([[1, 12.5]]), [[0.25, 0.25]])


def test_constant_column_maps_to_half(tmp_path):
    path = _write(tmp_path / "c.csv", "x1,x2,y\n1,3,0\n2,3,1\n3,3,2\n")
    with pytest.warns(DegenerateColumnWarning):
        data = load_dataset(path)
    assert np.all(data.X[:, 1] == 0.5)


def test_roundtrip_preserves_values(tmp_path):
    rng = np.random.default_rng(1)
    X = rng.normal(size=(30, 3)) * 1e3
    y = rng.normal(size=30)
    path = tmp_path / "rt.csv"
    write_dataset(path, X, y)
    header, data = read_numeric_csv(path)
    assert header == ["x0", "x1", "x2", "y"]
    assert np.allclose(data[:, :3], X, rtol=0, atol=1e-12)
    assert np.allclose(data[:, 3], y, rtol=0, atol=1e-12)


def test_parse_errors_carry_location(tmp_path):
    path = _write(tmp_path / "bad.csv", "x,y\n1,2\n3,oops\n")
    with pytest.raises(ParseError) as info:
        load_dataset(path)
    assert info.value.row == 2 and info.value.column == "y"
    with pytest.raises(ParseError):
        load_dataset(_write(tmp_path / "short.csv", "x,y\n1\n"))
    with pytest.raises(ParseError):
        load_dataset(_write(tmp_path / "nan.csv", "x,y\n1,nan\n"))


def test_model_dump_roundtrip():
    rng = np.random.default_rng(2)
    X = rng.random((120, 2))
    y = np.sin(4 * X[:, 0]) + X[:, 1]
    fit = sbt_fit(X, y, SbtConfig(bart=BartConfig(m=3), shardepth=2), 20, 15, seed=3)
    text = dump_model(fit.samples, {"columns": ["a", "b"]})
    samples, meta = load_model(text)
    assert meta == {"columns": ["a", "b"]}
    assert dump_model(samples, meta) == text
    a = sbt_predict(fit, X[:10], seed=1, n_draws=3)
    b = sbt_predict(samples, X[:10], seed=1, n_draws=3)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.hi, b.hi)
    with pytest.raises(ParseError):
        load_model("not a model\n")


def _fit_args(data, out, *extra):
    return ["fit", "--data", str(data), "--out", str(out), "--ntree", "3", "--nmcmc", "20",
            "--burn", "5", "--seed", "7", *extra]


def test_cmd_fit_writes_artifacts(small_csv, tmp_path):
    out = tmp_path / "m1"
    assert cli.main(_fit_args(small_csv, out, "--shardepth", "1", "--nmin", "5")) == 0
    for name in ("model.txt", "manifest.json", "diagnostics.csv"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["spec_version"] == "1"
    assert manifest["iterations"] == {"nmcmc": 20, "burn": 5, "saved": 15}
    assert all(sum(s) == 50 for s in manifest["shard_sizes"])
    lines = (out / "diagnostics.csv").read_text().splitlines()
    assert lines[0].startswith("iteration,u_move,u_accepted,tree_accept_rate")
    assert len(lines) == 21


def test_cmd_fit_is_byte_reproducible(small_csv, tmp_path):
    assert cli.main(_fit_args(small_csv, tmp_path / "a")) == 0
    assert cli.main(_fit_args(small_csv, tmp_path / "b", "--tc", "2")) == 0
    assert (tmp_path / "a" / "model.txt").read_bytes() == (tmp_path / "b" / "model.txt").read_bytes()


@pytest.mark.parametrize("extra", [["--model", "gbm"], ["--ntreeh", "2"], ["--tc", "0"],
                                   ["--burn", "25"], ["--bogus", "1"], ["--ntr", "3"],
                                   ["--randshard", "maybe"]])
def test_cmd_fit_usage_errors(small_csv, tmp_path, extra):
    with pytest.raises(SystemExit) as info:
        cli.main(_fit_args(small_csv, tmp_path / "x", *extra))
    assert info.value.code == 2


def test_cmd_fit_accepts_all_flags(small_csv, tmp_path):
    args = _fit_args(small_csv, tmp_path / "f", "--numcut", "50", "--shardepth", "2",
                     "--randshard", "TRUE", "--aux", "deterministic", "--pbd", "0.6", "0.4",
                     "--probchv", "0.2", "--tc", "2", "--model", "bart", "--nmin", "5")
    assert cli.main(args) == 0
    with pytest.warns(UserWarning):
        assert cli.main(_fit_args(small_csv, tmp_path / "g", "--probchvh", "0.1")) == 0


def test_cmd_fit_data_error_exit(tmp_path):
    bad = _write(tmp_path / "bad.csv", "x,y\n1,2\nz,3\n")
    assert cli.main(_fit_args(bad, tmp_path / "o")) == 3


def test_numerical_failure_exit_code(monkeypatch, small_csv, tmp_path):
    def boom(*args, **kwargs):
        raise NumericalError("matrix is not positive definite")

    monkeypatch.setattr(cli, "sbt_fit", boom)
    assert cli.main(_fit_args(small_csv, tmp_path / "n")) == 4


def test_cmd_predict(small_csv, tmp_path, capsys):
    out = tmp_path / "m"
    assert cli.main(_fit_args(small_csv, out)) == 0
    grid = _write(tmp_path / "g.csv", "a,b\n0.5,1.0\n")
    capsys.readouterr()
    assert cli.main(["predict", "--model", str(out), "--grid", str(grid)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "mean,lo95,hi95" and len(lines) == 2
    target = tmp_path / "p1.csv"
    args = ["predict", "--model", str(out / "model.txt"), "--grid", str(small_csv), "--n-draws",
            "4", "--seed", "3", "--out"]
    assert cli.main(args + [str(target)]) == 0
    assert cli.main(args + [str(tmp_path / "p2.csv")]) == 0
    assert target.read_bytes() == (tmp_path / "p2.csv").read_bytes()
    assert len(target.read_text().splitlines()) == 51
    wrong = _write(tmp_path / "w.csv", "a,b,c,d\n1,2,3,4\n")
    assert cli.main(["predict", "--model", str(out), "--grid", str(wrong)]) == 3
    assert cli.main(["predict", "--model", str(tmp_path / "nope"), "--grid", str(grid)]) == 3


def test_constant_model_predicts_the_constant(tmp_path, capsys):
    rng = np.random.default_rng(4)
    X = rng.random((60, 2))
    path = tmp_path / "const.csv"
    write_dataset(path, X, np.full(60, 2.5))
    out = tmp_path / "cm"
    assert cli.main(_fit_args(path, out, "--sigma", "1e-6")) == 0
    grid = tmp_path / "pt.csv"
    write_dataset(grid, X[:1], [0.0])
    capsys.readouterr()
    assert cli.main(["predict", "--model", str(out), "--grid", str(grid)]) == 0
    mean = float(capsys.readouterr().out.splitlines()[1].split(",")[0])
    assert abs(mean - 2.5) < 1e-6


def test_cmd_design(capsys):
    assert cli.main(["design", "--n", "7", "--B", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["allocation"] == [2, 2, 3] and out["value_exact"] == "12/343"
    assert cli.main(["design", "--criterion", "constrained", "--n", "7", "--lower", "1", "1",
                     "--upper", "6", "6"]) == 0
    assert json.loads(capsys.readouterr().out)["allocation"] == [3, 4]
    assert cli.main(["design", "--criterion", "constrained", "--n", "20", "--lower", "1", "1",
                     "--upper", "6", "6"]) == 3
    assert cli.main(["design", "--criterion", "minmax", "--n", "7", "--B", "3"]) == 0
    assert json.loads(capsys.readouterr().out)["value_exact"] == "1/2"


def test_cmd_simulate(tmp_path, capsys):
    target = tmp_path / "phi.csv"
    assert cli.main(["simulate", "--n", "40", "--B", "4", "--batches", "3", "--draws-per-batch",
                     "10", "--out", str(target)]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["draws"] == 30 and 0 <= summary["rate"] <= 1
    lines = target.read_text().splitlines()
    assert lines[0] == "batch_index,phi" and len(lines) == 31


def test_cmd_bench(tmp_path, capsys):
    target = tmp_path / "bench.csv"
    assert cli.main(["bench", "--n", "80", "--n-test", "20", "--ntree", "2", "--nmcmc", "12",
                     "--burn", "2", "--variants", "B", "E", "--out", str(target)]) == 0
    assert set(json.loads(capsys.readouterr().out)) == {"B", "E"}
    assert len(target.read_text().splitlines()) == 3


def test_process_exit_codes(small_csv, tmp_path):
    run = lambda *a: subprocess.run([sys.executable, "-m", "shardbart.cli", *a],
                                    capture_output=True, text=True)
    assert run("fit", "--data", str(small_csv), "--out", str(tmp_path), "--model", "x").returncode == 2
    assert run("fit", "--data", str(tmp_path / "missing.csv"), "--out",
               str(tmp_path)).returncode == 3
    assert run("design", "--n", "5", "--B", "2").returncode == 0
