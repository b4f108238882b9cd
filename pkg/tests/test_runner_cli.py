import csv
import json
import warnings
from pathlib import Path

import numpy as np
import pytest

from probmix import runner
from probmix.cli import main
from probmix.models import load_checkpoint

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

SMALL = ["dataset.n_train=30", "dataset.n_test=20", "model.hidden=[8]", "training.epochs=5"]


def _write_config(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_defaults_validate():
    cfg = runner.load_config()
    assert cfg["model"]["hidden"] == [128, 64]
    assert cfg["regularizer"]["method"] == "erm"


def test_overrides_parse_json_values():
    cfg = runner.load_config(None, ["training.epochs=7", "regularizer.method=mix", "model.hidden=[4,4]"])
    assert cfg["training"]["epochs"] == 7
    assert cfg["regularizer"]["method"] == "mix"
    assert cfg["model"]["hidden"] == [4, 4]


@pytest.mark.parametrize("override", ["training.epochs=-1", "regularizer.method=cutmix",
                                      "model.colour=3", "regularizer.alpha=0", "nonsense"])
def test_bad_config_raises(override):
    with pytest.raises(runner.ConfigError):
        runner.load_config(None, [override])


def test_bad_config_exit_code(tmp_path, capsys):
    path = _write_config(tmp_path, {"training": {"lr": "fast"}})
    assert main(["train", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    assert "training" in capsys.readouterr().err


def test_shipped_configs_validate():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = runner.load_config(path)
        assert runner.expand_sweep(cfg)


def test_generate_is_byte_identical(tmp_path):
    args = ["generate", "--set", "dataset.seed=3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for name in ("toy_regression_train_seed3.csv", "toy_regression_test_seed3.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_zero_epochs_evaluates_initialization():
    cfg = runner.load_config(None, SMALL + ["training.epochs=0"])
    result = runner.run_train(cfg, 0)
    assert result.best_epoch == 0
    metrics = {r.metric for r in result.records}
    assert {"nll", "mse", "rmse"} <= metrics


def test_train_results_are_deterministic(tmp_path):
    args = ["train", "--set", "regularizer.method=probmix"]
    for s in SMALL:
        args += ["--set", s]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert a.startswith(",".join(runner.RESULTS_HEADER).encode())


def test_sweep_runs_grid_and_resumes(tmp_path):
    cfg = runner.load_config(None, SMALL + ['sweep.method=["mix","probmix"]', "training.seeds=[0,1]"])
    first = runner.run_sweep(cfg, tmp_path)
    assert (first.completed, first.skipped, first.failed) == (4, 0, 0)
    rows = _rows(first.path)
    assert len({r["run_id"] for r in rows}) == 4
    assert {r["method"] for r in rows} == {"mix", "probmix"}
    before = first.path.read_bytes()
    again = runner.run_sweep(cfg, tmp_path)
    assert (again.completed, again.skipped) == (0, 4)
    assert first.path.read_bytes() == before


def test_diverged_run_is_recorded_and_sweep_continues(tmp_path):
    cfg = runner.load_config(None, SMALL + ["training.epochs=10", "training.lr=1e30", "training.seeds=[0,1]"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        summary = runner.run_sweep(cfg, tmp_path)
    assert summary.failed == 2
    failed = [r for r in _rows(summary.path) if r["metric"] == "failed"]
    assert len(failed) == 2 and all(float(r["value"]) >= 1 for r in failed)


def test_train_cli_exit_code_on_divergence(tmp_path):
    args = ["train", "--out", str(tmp_path)]
    for s in SMALL + ["training.epochs=10", "training.lr=1e30"]:
        args += ["--set", s]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        assert main(args) == 2


def test_export_density_band(tmp_path):
    cfg = runner.load_config(None, SMALL)
    runner.run_sweep(cfg, tmp_path)
    paths = runner.run_export_plots(tmp_path / "results.csv", grid_points=50)
    assert len(paths) == 1 and paths[0].name.endswith("_density.csv")
    table = np.loadtxt(paths[0], delimiter=",", skiprows=1)
    assert table.shape == (50, 4)
    assert np.all(np.diff(table[:, 0]) > 0)
    assert np.all(table[:, 3] >= table[:, 2])
    rid = paths[0].name.split("_")[0]
    model = load_checkpoint(tmp_path / "checkpoints" / f"{rid}.ckpt")
    meta = json.loads((tmp_path / "checkpoints" / f"{rid}.json").read_text())
    std = meta["standardizer"]
    x = (table[:, :1] - std["x_mean"]) / np.asarray(std["x_std"])
    mean = model.forward(x).mean.value[:, 0] * std["y_std"][0] + std["y_mean"][0]
    np.testing.assert_allclose(table[:, 1], mean, rtol=1e-12)


def test_export_boundary_probabilities(tmp_path):
    cfg = runner.load_config(None, SMALL + ["dataset.kind=\"toy-rings\"", "dataset.task=\"classification\"",
                                            "dataset.n_train=60"])
    runner.run_sweep(cfg, tmp_path)
    (path,) = runner.run_export_plots(tmp_path / "results.csv", kind="boundary")
    table = np.loadtxt(path, delimiter=",", skiprows=1)
    assert table.shape[1] == 5
    np.testing.assert_allclose(table[:, 2:].sum(axis=1), 1.0, atol=1e-9)
    assert runner.run_export_plots(tmp_path / "results.csv", kind="density") == []


def test_eval_cli_reproduces_training_metrics(tmp_path, capsys):
    sets = []
    for s in SMALL:
        sets += ["--set", s]
    assert main(["train", "--out", str(tmp_path)] + sets) == 0
    trained = {(r["split"], r["metric"]): r["value"] for r in _rows(tmp_path / "results.csv")}
    ckpt = next((tmp_path / "checkpoints").glob("*.ckpt"))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt)] + sets) == 0
    out = capsys.readouterr().out.strip().splitlines()
    evaluated = {(r["split"], r["metric"]): r["value"] for r in csv.DictReader(out)}
    assert evaluated[("test", "nll")] == trained[("test", "nll")]
    assert evaluated[("test", "rmse")] == trained[("test", "rmse")]


def test_selftest_cli(capsys):
    assert main(["selftest", "--trials", "5"]) == 0
    out = capsys.readouterr().out
    assert "[FAIL]" not in out and out.count("[PASS]") >= 7


def test_uci_fixture_end_to_end(tmp_path):
    cfg = runner.load_config(CONFIGS / "uci_fixture.json",
                             ["training.epochs=3", "training.seeds=[0]", "model.hidden=[8,4]"])
    summary = runner.run_sweep(cfg, tmp_path, save_checkpoints=False)
    assert summary.failed == 0 and summary.completed == len(cfg["sweep"]["method"])
    rows = _rows(summary.path)
    assert list(rows[0]) == list(runner.RESULTS_HEADER)
    for method in cfg["sweep"]["method"]:
        got = {(r["split"], r["metric"]) for r in rows if r["method"] == method}
        assert {("test", "nll"), ("test", "rmse"), ("val", "best_epoch")} <= got
    assert all(np.isfinite(float(r["value"])) for r in rows)
