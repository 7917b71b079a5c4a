"""Timestamped domains: rotating 2-Moons generation, chronological splits and a
plain-text dataset directory format.

Dataset directory layout::

    manifest.json   {"name", "task", "timestamps": [...], "files": [...]}
    domain_<k>.csv  header f0,...,f{d-1},y ; one instance per row
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

MIN_GAP = 1e-6
DEG_PER_UNIT = 18.0


class DatasetError(ValueError):
    """Malformed or inconsistent dataset directory."""


@dataclass
class Domain:
    t: float
    X: np.ndarray
    Y: np.ndarray
    task: str = "binary"

    def __post_init__(self):
        self.t = float(self.t)
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        self.Y = np.ascontiguousarray(self.Y, dtype=np.float64).reshape(-1, 1)
        if self.X.ndim != 2 or self.X.shape[0] < 1:
            raise DatasetError(f"domain at t={self.t}: X must be a non-empty N x d matrix, got {self.X.shape}")
        if self.Y.shape[0] != self.X.shape[0]:
            raise DatasetError(f"domain at t={self.t}: {self.X.shape[0]} features rows, {self.Y.shape[0]} targets")
        if not (np.isfinite(self.X).all() and np.isfinite(self.Y).all() and math.isfinite(self.t)):
            raise DatasetError(f"domain at t={self.t}: non-finite values")
        if self.task == "binary" and not np.isin(self.Y, (0.0, 1.0)).all():
            raise DatasetError(f"domain at t={self.t}: binary targets must be 0 or 1")

    def __len__(self) -> int:
        return self.X.shape[0]


@dataclass
class DomainSequence:
    domains: list[Domain]
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [d.t for d in self.domains]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DatasetError("domain timestamps must be strictly increasing")
        tasks = {d.task for d in self.domains}
        if len(tasks) > 1:
            raise DatasetError(f"mixed task kinds {sorted(tasks)}")

    def __len__(self) -> int:
        return len(self.domains)

    def __iter__(self):
        return iter(self.domains)

    def __getitem__(self, k):
        return self.domains[k]

    @property
    def timestamps(self) -> np.ndarray:
        return np.array([d.t for d in self.domains])

    @property
    def task(self) -> str:
        return self.domains[0].task if self.domains else "binary"


# ---------------------------------------------------------------------------
# 2-Moons

def rotation(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s], [s, c]])


def canonical_moons(n_per_class: int) -> tuple[np.ndarray, np.ndarray]:
    """Noiseless interleaved half circles: upper moon (label 1) centred at the
    origin, lower moon (label 0) centred at (1, 0.5)."""
    a = np.linspace(0.0, math.pi, n_per_class)
    upper = np.column_stack([np.cos(a), np.sin(a)])
    lower = np.column_stack([1.0 - np.cos(a), 0.5 - np.sin(a)])
    X = np.vstack([lower, upper])
    Y = np.concatenate([np.zeros(n_per_class), np.ones(n_per_class)])
    return X, Y


def generate_moons_domain(t: float, n_per_class: int = 500, noise_sd: float = 0.1,
                          seed: int = 0, center: Sequence[float] = (0.0, 0.0)) -> Domain:
    """Two moons rotated counterclockwise by 18 degrees per time unit about ``center``.

    Rotation is applied to the noiseless points, then Gaussian noise is added.
    The noise draw depends only on ``seed``, so equal seeds give identical
    noise at every t.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    X, Y = canonical_moons(n_per_class)
    c = np.asarray(center, dtype=np.float64)
    R = rotation(math.radians(DEG_PER_UNIT * t))
    X = (X - c) @ R.T + c
    if noise_sd > 0:
        X = X + noise_sd * np.random.default_rng(seed).standard_normal(X.shape)
    return Domain(t, X, Y, "binary")


def sample_timestamps(count: int, t_min: float, t_max: float, seed: int = 0) -> np.ndarray:
    """Sorted uniform draws on [t_min, t_max] with pairwise gaps of at least 1e-6."""
    if count < 1:
        raise ValueError("count must be >= 1")
    if not t_max > t_min and count > 1:
        raise ValueError("need t_max > t_min for more than one timestamp")
    if (count - 1) * MIN_GAP > t_max - t_min and count > 1:
        raise ValueError("interval too short for the requested count")
    rng = np.random.default_rng(seed)
    while True:
        ts = np.sort(rng.uniform(t_min, t_max, size=count))
        if count == 1 or np.diff(ts).min() >= MIN_GAP:
            return ts


def moons_sequence(n_domains: int = 50, t_min: float = 0.0, t_max: float = 50.0,
                   n_per_class: int = 500, noise_sd: float = 0.1, seed: int = 0,
                   center: Sequence[float] = (0.0, 0.0)) -> DomainSequence:
    ts = sample_timestamps(n_domains, t_min, t_max, seed)
    ss = np.random.SeedSequence(seed).spawn(n_domains)
    doms = [generate_moons_domain(t, n_per_class, noise_sd, int(s.generate_state(1)[0]), center)
            for t, s in zip(ts, ss)]
    meta = {"generator": "moons", "n_domains": n_domains, "t_min": t_min, "t_max": t_max,
            "n_per_class": n_per_class, "noise_sd": noise_sd, "seed": seed, "center": list(center)}
    return DomainSequence(doms, "2-moons", meta)


def split_train_test(seq: DomainSequence, test_fraction: float = 0.3) -> tuple[DomainSequence, DomainSequence]:
    """Chronological split; the last ceil(test_fraction * T) domains are test."""
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must be in [0, 1]")
    # round first so 0.3 * 50 = 15.000000000000002 gives 15
    n_test = math.ceil(round(test_fraction * len(seq), 9))
    cut = len(seq) - n_test
    return (DomainSequence(seq.domains[:cut], seq.name, dict(seq.meta)),
            DomainSequence(seq.domains[cut:], seq.name, dict(seq.meta)))


def constant_sequence(domain: Domain, timestamps: Sequence[float]) -> DomainSequence:
    """The same data replicated at several timestamps (a drift-free sequence)."""
    return DomainSequence([Domain(t, domain.X, domain.Y, domain.task) for t in timestamps], "constant")


# ---------------------------------------------------------------------------
# file format

def save_sequence(seq: DomainSequence, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    files = []
    for k, d in enumerate(seq.domains):
        fname = f"domain_{k}.csv"
        with open(path / fname, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"f{j}" for j in range(d.X.shape[1])] + ["y"])
            for x, y in zip(d.X, d.Y[:, 0]):
                w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
        files.append(fname)
    manifest = {"name": seq.name, "task": seq.task,
                "timestamps": [float(d.t) for d in seq.domains], "files": files}
    if seq.meta:
        manifest["meta"] = seq.meta
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_sequence(path) -> DomainSequence:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no manifest.json in dataset directory {path}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{mpath}: invalid JSON ({e})") from None
    for key in ("name", "task", "timestamps", "files"):
        if key not in manifest:
            raise DatasetError(f"{mpath}: missing field {key!r}")
    ts, files = manifest["timestamps"], manifest["files"]
    if len(ts) != len(files):
        raise DatasetError(f"{mpath}: {len(ts)} timestamps but {len(files)} files")
    doms = []
    for t, fname in zip(ts, files):
        fpath = path / fname
        if not fpath.is_file():
            raise FileNotFoundError(f"domain file {fpath} listed in manifest is missing")
        with open(fpath, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if not header or header[-1] != "y":
            raise DatasetError(f"{fpath}: header must end with 'y'")
        try:
            arr = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
        except ValueError as e:
            raise DatasetError(f"{fpath}: {e}") from None
        if arr.ndim != 2 or arr.shape[1] != len(header):
            raise DatasetError(f"{fpath}: rows do not match header width {len(header)}")
        doms.append(Domain(t, arr[:, :-1], arr[:, -1], manifest["task"]))
    return DomainSequence(doms, manifest["name"], manifest.get("meta", {}))
