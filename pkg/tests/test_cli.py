import json
import subprocess
import sys

import numpy as np
import pytest

from koodos import cli

TINY_KOODOS = {"warm_epochs": 20, "joint_epochs": 20, "ae_hidden": [16], "latent_dim": 4,
               "pair_batch": None, "instance_batch": None, "dynamics_warmup": 5}


def _config(tmp_path, **over):
    doc = {"seed": 0, "out": str(tmp_path / "run"),
           "dataset": {"generator": "moons", "n_domains": 6, "t_min": 0, "t_max": 6, "n_per_class": 15},
           "split": {"test_fraction": 0.3}, "model": {"hidden": [8]},
           "koodos": dict(TINY_KOODOS), "extrapolate": {"times": [4.0, 8.0, 12.0]}}
    doc.update(over)
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


def _err(capsys):
    return capsys.readouterr().err.strip()


def test_generate_default_recipe(tmp_path):
    cfg = _config(tmp_path, dataset={"generator": "moons"})
    assert cli.run(["generate", "--config", str(cfg)]) == 0
    manifest = json.loads((tmp_path / "run" / "dataset" / "manifest.json").read_text())
    ts = manifest["timestamps"]
    assert len(ts) == 50 and all(0 <= t <= 50 for t in ts) and ts == sorted(ts)


@pytest.fixture(scope="module")
def trained_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cli")
    cfg = _config(tmp)
    assert cli.run(["train", "--config", str(cfg)]) == 0
    return tmp, cfg


def test_train_outputs(trained_run):
    tmp, _ = trained_run
    run = tmp / "run"
    assert {p.name for p in run.iterdir()} >= {"checkpoint.json", "history.csv", "metrics.json"}
    m = json.loads((run / "metrics.json").read_text())
    assert m["schema_version"] == 1
    assert set(m) >= {"dataset", "seed", "per_domain", "aggregate", "baseline_offline", "baseline_lastdomain"}
    assert len(m["per_domain"]) == 2 and set(m["per_domain"][0]) == {"t", "metric"}


def test_eval_deterministic(trained_run, tmp_path):
    tmp, cfg = trained_run
    ck = str(tmp / "run" / "checkpoint.json")
    assert cli.run(["eval", "--config", str(cfg), "--out", str(tmp_path / "a"), "--checkpoint", ck]) == 0
    assert cli.run(["eval", "--config", str(cfg), "--out", str(tmp_path / "b"), "--checkpoint", ck]) == 0
    a = (tmp_path / "a" / "metrics.json").read_bytes()
    assert a == (tmp_path / "b" / "metrics.json").read_bytes()
    assert a == (tmp / "run" / "metrics.json").read_bytes()


def test_extrapolate(trained_run):
    tmp, cfg = trained_run
    assert cli.run(["extrapolate", "--config", str(cfg), "--times", "5,7.5,9"]) == 0
    lines = (tmp / "run" / "trajectory.csv").read_text().splitlines()
    assert lines[0] == "t,c1,c2" and len(lines) == 4
    assert (tmp / "run" / "latent_norms.csv").is_file()


def test_spectrum_free_operator(trained_run, capsys):
    _, cfg = trained_run
    assert cli.run(["spectrum", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("stability: ")


def test_spectrum_skew_marginal(tmp_path, capsys):
    cfg = _config(tmp_path, koodos=dict(TINY_KOODOS, operator="skew"))
    assert cli.run(["train", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert cli.run(["spectrum", "--config", str(cfg)]) == 0
    assert capsys.readouterr().out.startswith("stability: marginal")
    lines = (tmp_path / "run" / "spectrum.csv").read_text().splitlines()
    assert lines[0] == "re,im" and len(lines) == 5


def test_seed_env_override(tmp_path, monkeypatch):
    cfg = _config(tmp_path, dataset={"generator": "moons", "n_domains": 4, "n_per_class": 3})
    monkeypatch.setenv("KOODOS_SEED", "7")
    assert cli.run(["generate", "--config", str(cfg)]) == 0
    m = json.loads((tmp_path / "run" / "dataset" / "manifest.json").read_text())
    assert m["meta"]["seed"] == 7


def test_error_categories(tmp_path, capsys):
    assert cli.run(["bogus", "--config", "x"]) == cli.EXIT_CODES["usage"]
    assert _err(capsys).startswith("error: usage: ")

    assert cli.run(["train", "--config", str(tmp_path / "missing.json")]) == cli.EXIT_CODES["missing_file"]
    assert _err(capsys).startswith("error: missing_file: ")

    bad = _config(tmp_path, koodos={"alpha": "one"})
    assert cli.run(["train", "--config", str(bad)]) == cli.EXIT_CODES["config"]
    assert "koodos" in _err(capsys)

    bad = _config(tmp_path, dataset={"generator": "moons", "n_domains": -3})
    assert cli.run(["generate", "--config", str(bad)]) == cli.EXIT_CODES["config"]
    assert "dataset.n_domains" in _err(capsys)

    cfg = _config(tmp_path)
    assert cli.run(["spectrum", "--config", str(cfg)]) == cli.EXIT_CODES["missing_file"]
    capsys.readouterr()
    (tmp_path / "run").mkdir(exist_ok=True)
    (tmp_path / "run" / "checkpoint.json").write_text("{]")
    assert cli.run(["spectrum", "--config", str(cfg)]) == cli.EXIT_CODES["checkpoint"]
    assert _err(capsys).startswith("error: checkpoint: ")

    assert cli.run(["extrapolate", "--config", str(cfg), "--times", "a,b"]) == cli.EXIT_CODES["usage"]
    capsys.readouterr()

    ds = tmp_path / "ds"
    ds.mkdir()
    (ds / "manifest.json").write_text(json.dumps({"name": "x", "task": "binary", "timestamps": [0, 1],
                                                  "files": ["a.csv"]}))
    bad = _config(tmp_path, dataset={"path": str(ds)})
    assert cli.run(["train", "--config", str(bad)]) == cli.EXIT_CODES["dataset"]
    assert _err(capsys).startswith("error: dataset: ")


def test_eval_dimension_mismatch(trained_run, tmp_path, capsys):
    tmp, _ = trained_run
    ds = tmp_path / "ds3"
    ds.mkdir()
    rows = "f0,f1,f2,y\n0.1,0.2,0.3,1.0\n"
    for k in range(2):
        (ds / f"domain_{k}.csv").write_text(rows)
    (ds / "manifest.json").write_text(json.dumps({"name": "x", "task": "binary", "timestamps": [0.0, 1.0],
                                                  "files": ["domain_0.csv", "domain_1.csv"]}))
    cfg = _config(tmp_path, dataset={"path": str(ds)}, split={"test_fraction": 0.5})
    code = cli.run(["eval", "--config", str(cfg), "--checkpoint", str(tmp / "run" / "checkpoint.json")])
    assert code == cli.EXIT_CODES["dimension"]
    assert _err(capsys).startswith("error: dimension: ")


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "koodos.cli", "generate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert proc.stderr.startswith("error: usage: ")
