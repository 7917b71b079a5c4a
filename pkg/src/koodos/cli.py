"""Command-line runner.

    koodos {generate|train|eval|extrapolate|spectrum} --config run.json [--out DIR]
           [--checkpoint PATH] [--times t1,t2,...]

The run config is one JSON file::

    {
      "seed": 0,
      "out": "runs/moons",
      "dataset": {"generator": "moons", "n_domains": 50, "t_min": 0, "t_max": 50,
                  "n_per_class": 500, "noise_sd": 0.1},      # or {"path": "data/dir"}
      "split": {"test_fraction": 0.3},
      "model": {"hidden": [50, 50, 50], "hidden_activation": "relu"},
      "koodos": {... KoodosConfig fields ...},
      "eval": {"split": "test", "metric": "error_rate"},
      "extrapolate": {"times": [35.0, 40.0], "dims": 2}
    }

``KOODOS_SEED`` in the environment replaces ``seed``.  Failures print one line
``error: <category>: <message>`` on stderr and exit with the category's code.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from koodos import checkpoint as ckpt
from koodos import domains as dom
from koodos import spectral, system as ks
from koodos.diffcore import ShapeError
from koodos.nets import FlatParams, MlpSpec

SCHEMA_VERSION = 1

EXIT_CODES = {
    "internal": 1,
    "usage": 2,
    "config": 3,
    "missing_file": 4,
    "dataset": 5,
    "checkpoint": 6,
    "dimension": 7,
    "numerical": 8,
}

log = logging.getLogger("koodos")


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


def _config_error(path: str, msg: str) -> CliError:
    return CliError("config", f"{path}: {msg}")


# ---------------------------------------------------------------------------
# config parsing

SECTIONS = {"seed", "out", "dataset", "split", "model", "koodos", "eval", "extrapolate"}
GENERATOR_KEYS = {"generator", "n_domains", "t_min", "t_max", "n_per_class", "noise_sd", "center"}


def _expect(obj, kind, path):
    if not isinstance(obj, kind):
        name = kind.__name__ if isinstance(kind, type) else "/".join(k.__name__ for k in kind)
        raise _config_error(path, f"expected {name}, got {type(obj).__name__}")
    return obj


def _number(obj, path, integer=False):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)):
        raise _config_error(path, f"expected a number, got {json.dumps(obj)}")
    if integer and int(obj) != obj:
        raise _config_error(path, f"expected an integer, got {obj}")
    if not math.isfinite(obj):
        raise _config_error(path, "must be finite")
    return int(obj) if integer else float(obj)


class RunConfig:
    """Validated run configuration."""

    def __init__(self, raw: dict, base_dir: Path, seed_override: str | None = None):
        _expect(raw, dict, "config")
        unknown = set(raw) - SECTIONS
        if unknown:
            raise _config_error(sorted(unknown)[0], "unknown section")
        self.seed = _number(raw.get("seed", 0), "seed", integer=True)
        if seed_override is not None:
            try:
                self.seed = int(seed_override)
            except ValueError:
                raise _config_error("KOODOS_SEED", f"not an integer: {seed_override!r}") from None
        self.base_dir = base_dir
        self.out = Path(_expect(raw.get("out", "koodos-out"), str, "out"))
        self.dataset = self._dataset(_expect(raw.get("dataset", {"generator": "moons"}), dict, "dataset"))
        split = _expect(raw.get("split", {}), dict, "split")
        if set(split) - {"test_fraction"}:
            raise _config_error(f"split.{sorted(set(split) - {'test_fraction'})[0]}", "unknown field")
        self.test_fraction = _number(split.get("test_fraction", 0.3), "split.test_fraction")
        if not 0.0 <= self.test_fraction < 1.0:
            raise _config_error("split.test_fraction", "must be in [0, 1)")
        self.model = self._model(_expect(raw.get("model", {}), dict, "model"))
        self.koodos = self._koodos(_expect(raw.get("koodos", {}), dict, "koodos"))
        ev = _expect(raw.get("eval", {}), dict, "eval")
        if set(ev) - {"split", "metric"}:
            raise _config_error(f"eval.{sorted(set(ev) - {'split', 'metric'})[0]}", "unknown field")
        self.eval_split = ev.get("split", "test")
        if self.eval_split not in ("train", "test", "all"):
            raise _config_error("eval.split", "must be 'train', 'test' or 'all'")
        self.metric = ev.get("metric")
        if self.metric is not None and self.metric not in ks.METRICS:
            raise _config_error("eval.metric", f"must be one of {sorted(ks.METRICS)}")
        ex = _expect(raw.get("extrapolate", {}), dict, "extrapolate")
        if set(ex) - {"times", "dims"}:
            raise _config_error(f"extrapolate.{sorted(set(ex) - {'times', 'dims'})[0]}", "unknown field")
        times = _expect(ex.get("times", []), list, "extrapolate.times")
        self.times = [_number(t, f"extrapolate.times[{k}]") for k, t in enumerate(times)]
        self.dims = _number(ex.get("dims", 2), "extrapolate.dims", integer=True)
        if self.dims < 1:
            raise _config_error("extrapolate.dims", "must be >= 1")

    def _dataset(self, d: dict) -> dict:
        if "path" in d:
            if set(d) != {"path"}:
                raise _config_error("dataset", "'path' cannot be combined with generator fields")
            p = Path(_expect(d["path"], str, "dataset.path"))
            return {"path": p if p.is_absolute() else self.base_dir / p}
        unknown = set(d) - GENERATOR_KEYS
        if unknown:
            raise _config_error(f"dataset.{sorted(unknown)[0]}", "unknown field")
        if d.get("generator", "moons") != "moons":
            raise _config_error("dataset.generator", f"unknown generator {d['generator']!r}")
        out = {"n_domains": _number(d.get("n_domains", 50), "dataset.n_domains", integer=True),
               "t_min": _number(d.get("t_min", 0.0), "dataset.t_min"),
               "t_max": _number(d.get("t_max", 50.0), "dataset.t_max"),
               "n_per_class": _number(d.get("n_per_class", 500), "dataset.n_per_class", integer=True),
               "noise_sd": _number(d.get("noise_sd", 0.1), "dataset.noise_sd")}
        center = _expect(d.get("center", [0.0, 0.0]), list, "dataset.center")
        if len(center) != 2:
            raise _config_error("dataset.center", "must have two coordinates")
        out["center"] = [_number(c, f"dataset.center[{k}]") for k, c in enumerate(center)]
        if out["n_domains"] < 1:
            raise _config_error("dataset.n_domains", "must be >= 1")
        if out["n_per_class"] < 1:
            raise _config_error("dataset.n_per_class", "must be >= 1")
        if out["noise_sd"] < 0:
            raise _config_error("dataset.noise_sd", "must be >= 0")
        if out["n_domains"] > 1 and not out["t_max"] > out["t_min"]:
            raise _config_error("dataset.t_max", "must exceed t_min")
        return out

    def _model(self, d: dict) -> dict:
        unknown = set(d) - {"hidden", "hidden_activation"}
        if unknown:
            raise _config_error(f"model.{sorted(unknown)[0]}", "unknown field")
        hidden = _expect(d.get("hidden", [50, 50, 50]), list, "model.hidden")
        hidden = [_number(h, f"model.hidden[{k}]", integer=True) for k, h in enumerate(hidden)]
        if not hidden or min(hidden) < 1:
            raise _config_error("model.hidden", "needs at least one positive width")
        act = d.get("hidden_activation", "relu")
        if act not in ("relu", "tanh"):
            raise _config_error("model.hidden_activation", "must be 'relu' or 'tanh'")
        return {"hidden": hidden, "hidden_activation": act}

    def _koodos(self, d: dict) -> ks.KoodosConfig:
        known = set(ks.KoodosConfig.__dataclass_fields__) - {"seed"}
        for k in d:
            if k not in known:
                raise _config_error(f"koodos.{k}", "unknown field" + (" (use the top-level seed)" if k == "seed" else ""))
        try:
            return ks.KoodosConfig(**d, seed=self.seed)
        except (TypeError, ValueError) as e:
            raise _config_error("koodos", str(e)) from None

    def output_dir(self, flag: str | None) -> Path:
        out = Path(flag) if flag else self.out
        return out if out.is_absolute() else Path.cwd() / out


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise CliError("missing_file", f"config {path} not found")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CliError("config", f"config: invalid JSON at line {e.lineno} column {e.colno}") from None
    return RunConfig(raw, path.parent, os.environ.get("KOODOS_SEED"))


# ---------------------------------------------------------------------------
# commands

def build_dataset(rc: RunConfig) -> dom.DomainSequence:
    if "path" in rc.dataset:
        return dom.load_sequence(rc.dataset["path"])
    g = rc.dataset
    return dom.moons_sequence(g["n_domains"], g["t_min"], g["t_max"], g["n_per_class"],
                              g["noise_sd"], rc.seed, g["center"])


def _spec(rc: RunConfig, seq: dom.DomainSequence) -> MlpSpec:
    base = MlpSpec.for_task(seq[0].X.shape[1], rc.model["hidden"], seq.task)
    return MlpSpec(base.widths, rc.model["hidden_activation"], base.output_activation, base.task)


def _split(rc: RunConfig, seq):
    train, test = dom.split_train_test(seq, rc.test_fraction)
    if len(train) == 0:
        raise CliError("dataset", "split leaves no training domains")
    return train, test


def cmd_generate(rc: RunConfig, out: Path) -> Path:
    target = out / "dataset"
    dom.save_sequence(build_dataset(rc), target)
    print(target)
    return target


def _metrics(rc: RunConfig, system: ks.KoodosSystem, seq, name: str) -> dict:
    train, test = _split(rc, seq)
    doms = {"train": list(train), "test": list(test), "all": list(seq)}[rc.eval_split]
    metric = rc.metric or ks.default_metric(seq.task)
    res = ks.evaluate(system, doms, metric)
    doc = {"schema_version": SCHEMA_VERSION, "dataset": name, "seed": rc.seed, "split": rc.eval_split,
           "metric": metric, "per_domain": res["per_domain"], "aggregate": res["aggregate"]}
    for key in ("offline", "lastdomain"):
        theta = system.baselines.get(key)
        doc[f"baseline_{key}"] = (ks.evaluate_static(FlatParams(theta, system.spec), doms, metric)["aggregate"]
                                  if theta is not None else None)
    return doc


def _write_json(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_train(rc: RunConfig, out: Path) -> Path:
    seq = build_dataset(rc)
    train, _ = _split(rc, seq)
    spec = _spec(rc, seq)
    cfg = rc.koodos
    system = ks.train_joint(train, cfg, spec)
    system.baselines = {
        "offline": ks.baseline_offline(train, spec, cfg.warm_epochs, cfg.lr_model, cfg.seed).theta,
        "lastdomain": ks.baseline_lastdomain(train, spec, cfg.warm_epochs, cfg.lr_model, cfg.seed).theta,
    }
    out.mkdir(parents=True, exist_ok=True)
    path = ckpt.save_checkpoint(system, out / "checkpoint.json")
    ks.write_history_csv(system.history, out / "history.csv")
    _write_json(_metrics(rc, system, seq, seq.name), out / "metrics.json")
    print(path)
    return path


def _checkpoint_path(out: Path, flag: str | None) -> Path:
    return Path(flag) if flag else out / "checkpoint.json"


def cmd_eval(rc: RunConfig, out: Path, checkpoint_path: Path) -> Path:
    system = ckpt.load_checkpoint(checkpoint_path)
    seq = build_dataset(rc)
    if seq[0].X.shape[1] != system.spec.widths[0]:
        raise CliError("dimension", f"dataset has {seq[0].X.shape[1]} features, checkpoint model expects "
                                    f"{system.spec.widths[0]}")
    path = out / "metrics.json"
    _write_json(_metrics(rc, system, seq, seq.name), path)
    print(path)
    return path


def parse_times(text: str | None, rc: RunConfig) -> list[float]:
    if text:
        try:
            times = [float(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise CliError("usage", f"--times: cannot parse {text!r} as comma-separated numbers") from None
        if not all(math.isfinite(t) for t in times):
            raise CliError("usage", "--times: values must be finite")
    else:
        times = rc.times
    if not times:
        raise CliError("usage", "no query times (use --times or extrapolate.times)")
    return times


def cmd_extrapolate(rc: RunConfig, out: Path, checkpoint_path: Path, times: list[float]) -> Path:
    system = ckpt.load_checkpoint(checkpoint_path)
    thetas = [ks.generalize(system, t).theta for t in times]
    pca = spectral.pca_project(thetas, rc.dims)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.csv"
    spectral.write_trajectory_csv(times, pca.points, path)
    if system.koopman and system.operator.is_linear:
        with open(out / "latent_norms.csv", "w") as fh:
            fh.write("t,anchor_norm,norm\n")
            for t in times:
                z0, zs = ks.latent_state(system, t)
                fh.write(f"{t!r},{float(np.linalg.norm(z0))!r},{float(np.linalg.norm(zs))!r}\n")
    print(path)
    return path


def cmd_spectrum(rc: RunConfig, out: Path, checkpoint_path: Path) -> Path:
    system = ckpt.load_checkpoint(checkpoint_path)
    if not system.koopman or not system.operator.is_linear:
        raise CliError("checkpoint", "checkpoint has no linear Koopman operator to analyse")
    report = spectral.assess_stability(system.K())
    out.mkdir(parents=True, exist_ok=True)
    path = out / "spectrum.csv"
    spectral.write_spectrum_csv(report, path)
    print(f"stability: {report.classification} max_real={report.max_real!r}")
    return path


# ---------------------------------------------------------------------------
# entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="koodos", description="Koopman-space model dynamics for drifting domains")
    p.add_argument("command", choices=["generate", "train", "eval", "extrapolate", "spectrum"])
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", help="output directory (default: config 'out')")
    p.add_argument("--checkpoint", help="checkpoint path (default: <out>/checkpoint.json)")
    p.add_argument("--times", help="comma-separated query times for extrapolate")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except CliError as e:
        return _fail(e.category, str(e))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        rc = load_run_config(args.config)
        out = rc.output_dir(args.out)
        if args.command == "generate":
            cmd_generate(rc, out)
        elif args.command == "train":
            cmd_train(rc, out)
        elif args.command == "eval":
            cmd_eval(rc, out, _checkpoint_path(out, args.checkpoint))
        elif args.command == "extrapolate":
            cmd_extrapolate(rc, out, _checkpoint_path(out, args.checkpoint), parse_times(args.times, rc))
        else:
            cmd_spectrum(rc, out, _checkpoint_path(out, args.checkpoint))
    except CliError as e:
        return _fail(e.category, str(e))
    except FileNotFoundError as e:
        return _fail("missing_file", str(e))
    except ckpt.CheckpointError as e:
        return _fail("checkpoint", str(e))
    except dom.DatasetError as e:
        return _fail("dataset", str(e))
    except ShapeError as e:
        return _fail("dimension", str(e))
    except (FloatingPointError, spectral.ConvergenceError) as e:
        return _fail("numerical", str(e))
    except ValueError as e:
        return _fail("config", str(e))
    return 0


def _fail(category: str, message: str) -> int:
    message = " ".join(str(message).split())
    print(f"error: {category}: {message}", file=sys.stderr)
    return EXIT_CODES[category]


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
