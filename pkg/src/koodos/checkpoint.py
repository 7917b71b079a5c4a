"""JSON checkpoints for trained systems.

Arrays are stored as ``{"shape": [...], "b64": ...}`` holding little-endian
float64 bytes, so a save/load round trip is bit-exact.  Keys are sorted and the
layout is fixed, which makes two saves of the same system byte-identical.
"""
from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from koodos.nets import Autoencoder, AutoencoderSpec, DenseStack, DirectDynamics, MlpSpec, OperatorSpec, param_count
from koodos.system import KoodosConfig, KoodosSystem

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "b64": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict, where: str = "array") -> np.ndarray:
    try:
        raw = base64.b64decode(d["b64"], validate=True)
        shape = tuple(int(s) for s in d["shape"])
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"{where}: malformed array ({e})") from None
    a = np.frombuffer(raw, dtype="<f8")
    if a.size != int(np.prod(shape, dtype=np.int64)):
        raise CheckpointError(f"{where}: {a.size} values for shape {shape}")
    return a.reshape(shape).astype(np.float64)


def _stack(stack: DenseStack) -> dict:
    return {"widths": list(stack.widths),
            "layers": [[encode_array(w), encode_array(b)] for w, b in stack.layers]}


def _unstack(d: dict, where: str) -> DenseStack:
    layers = [(decode_array(w, f"{where}.W{k}"), decode_array(b, f"{where}.b{k}"))
              for k, (w, b) in enumerate(d["layers"])]
    return DenseStack(d["widths"], layers=layers)


def to_dict(system: KoodosSystem) -> dict:
    doc = {
        "format_version": FORMAT_VERSION,
        "spec": system.spec.to_dict(),
        "config": system.config.to_dict(),
        "timestamps": [float(t) for t in system.timestamps],
        "thetas": encode_array(system.thetas),
        "ae": None,
        "operator": None,
        "dynamics": None,
        "baselines": {k: encode_array(v) for k, v in sorted(system.baselines.items())},
        "history": system.history,
    }
    if system.ae is not None:
        sp = system.ae.spec
        doc["ae"] = {"n_params": sp.n_params, "hidden": list(sp.hidden), "latent": sp.latent,
                     "encoder": _stack(system.ae.encoder), "decoder": _stack(system.ae.decoder)}
    if system.operator is not None:
        op = system.operator
        doc["operator"] = {"kind": op.kind, "dim": op.dim, "rank": op.rank, "hidden": op.hidden,
                           "mats": {k: encode_array(op.mats[k]) for k in op.shapes()}}
    if system.dynamics is not None:
        doc["dynamics"] = {"n_params": system.dynamics.n_params, "net": _stack(system.dynamics.net)}
    return doc


def from_dict(doc: dict) -> KoodosSystem:
    if not isinstance(doc, dict):
        raise CheckpointError("checkpoint must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r} (expected {FORMAT_VERSION})")
    try:
        spec = MlpSpec.from_dict(doc["spec"])
        cfg = KoodosConfig.from_dict(doc["config"])
        system = KoodosSystem(np.array(doc["timestamps"], dtype=np.float64),
                              decode_array(doc["thetas"], "thetas"), spec, cfg)
        if doc.get("ae"):
            a = doc["ae"]
            aspec = AutoencoderSpec(a["n_params"], tuple(a["hidden"]), a["latent"])
            system.ae = Autoencoder(aspec, encoder=_unstack(a["encoder"], "ae.encoder"),
                                    decoder=_unstack(a["decoder"], "ae.decoder"))
        if doc.get("operator"):
            o = doc["operator"]
            mats = {k: decode_array(v, f"operator.{k}") for k, v in o["mats"].items()}
            system.operator = OperatorSpec(o["kind"], o["dim"], o["rank"], o["hidden"], mats)
            missing = set(system.operator.shapes()) - set(mats)
            if missing:
                raise CheckpointError(f"operator: missing matrices {sorted(missing)}")
        if doc.get("dynamics"):
            d = doc["dynamics"]
            system.dynamics = DirectDynamics(d["n_params"], stack=_unstack(d["net"], "dynamics.net"))
        system.baselines = {k: decode_array(v, f"baselines.{k}") for k, v in doc.get("baselines", {}).items()}
    except KeyError as e:
        raise CheckpointError(f"checkpoint missing field {e}") from None
    system.history = [dict(row) for row in doc.get("history", [])]
    if system.thetas.shape[1] != param_count(spec):
        raise CheckpointError(f"thetas have {system.thetas.shape[1]} columns, spec needs {param_count(spec)}")
    return system


def dumps(system: KoodosSystem) -> str:
    return json.dumps(to_dict(system), sort_keys=True, separators=(",", ":"))


def save_checkpoint(system: KoodosSystem, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(system))
    return path


def load_checkpoint(path) -> KoodosSystem:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: invalid JSON ({e})") from None
    return from_dict(doc)
