"""Predictive MLP with flat parameters, the Koopman autoencoder, operator
variants and the direct parameter-dynamics network.

Parameters of the predictive model live in one flat vector so they can be the
state of a dynamical system.  Layout is layer-major: for each layer the weight
matrix (in x out, row-major) followed by its bias row.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from koodos import diffcore as dc
from koodos.diffcore import ShapeError, Tensor

TASKS = ("binary", "regression")
OPERATOR_KINDS = ("full", "skew", "lowrank", "mlp-dynamics")


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"
    task: str = "binary"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 3:
            raise ValueError(f"MlpSpec needs at least one hidden layer, got widths {self.widths}")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"MlpSpec widths must be positive, got {self.widths}")
        if self.hidden_activation not in ("relu", "tanh"):
            raise ValueError(f"unknown hidden activation {self.hidden_activation!r}")
        if self.output_activation not in ("sigmoid", "identity"):
            raise ValueError(f"unknown output activation {self.output_activation!r}")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")

    @classmethod
    def for_task(cls, n_in: int, hidden: Sequence[int], task: str = "binary") -> "MlpSpec":
        out_act = "sigmoid" if task == "binary" else "identity"
        return cls((n_in, *hidden, 1), "relu", out_act, task)

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "hidden_activation": self.hidden_activation,
                "output_activation": self.output_activation, "task": self.task}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), d.get("hidden_activation", "relu"),
                   d.get("output_activation", "sigmoid"), d.get("task", "binary"))


class LayoutEntry(NamedTuple):
    layer: int
    kind: str  # "weight" | "bias"
    shape: tuple[int, int]
    offset: int

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]


def layout(spec: MlpSpec) -> list[LayoutEntry]:
    out, off = [], 0
    for k, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        out.append(LayoutEntry(k, "weight", (a, b), off))
        off += a * b
        out.append(LayoutEntry(k, "bias", (1, b), off))
        off += b
    return out


def param_count(spec: MlpSpec) -> int:
    last = layout(spec)[-1]
    return last.offset + last.size


@dataclass
class FlatParams:
    """Flat parameter vector of an MLP plus its spec."""

    theta: np.ndarray
    spec: MlpSpec

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(-1)
        p = param_count(self.spec)
        if self.theta.size != p:
            raise ShapeError(f"theta has {self.theta.size} entries, layout of {self.spec.widths} needs {p}")

    @property
    def layout(self) -> list[LayoutEntry]:
        return layout(self.spec)

    def __len__(self) -> int:
        return self.theta.size


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_mlp(widths: Sequence[int], rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(glorot_uniform(rng, a, b), np.zeros((1, b))) for a, b in zip(widths[:-1], widths[1:])]


def init_params(spec: MlpSpec, seed: int | np.random.Generator = 0) -> FlatParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return flatten(init_mlp(spec.widths, rng), spec)


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]], spec: MlpSpec) -> FlatParams:
    """Pack ``[(W, b), ...]`` into a flat vector in layout order."""
    entries = layout(spec)
    if len(layers) * 2 != len(entries):
        raise ShapeError(f"{len(layers)} layers given, spec {spec.widths} has {len(entries) // 2}")
    chunks = []
    for (w, b), ew, eb in zip(layers, entries[0::2], entries[1::2]):
        w = np.asarray(w, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64).reshape(1, -1)
        if w.shape != ew.shape or b.shape != eb.shape:
            raise ShapeError(f"layer {ew.layer}: got W{w.shape}, b{b.shape}; expected W{ew.shape}, b{eb.shape}")
        chunks += [w.ravel(), b.ravel()]
    return FlatParams(np.concatenate(chunks), spec)


def unflatten(flat: FlatParams) -> list[tuple[np.ndarray, np.ndarray]]:
    entries = flat.layout
    total = entries[-1].offset + entries[-1].size
    if flat.theta.size != total:
        raise ShapeError(f"theta has {flat.theta.size} entries, layout needs {total}")
    th = flat.theta
    return [(th[ew.offset:ew.offset + ew.size].reshape(ew.shape).copy(),
             th[eb.offset:eb.offset + eb.size].reshape(eb.shape).copy())
            for ew, eb in zip(entries[0::2], entries[1::2])]


def _activate(x: Tensor, name: str) -> Tensor:
    if name == "relu":
        return dc.relu(x)
    if name == "tanh":
        return dc.tanh(x)
    return x


def forward_logits(theta_row: Tensor, spec: MlpSpec, X) -> Tensor:
    """Differentiable pre-activation output of g(X; theta) for a 1 x P theta row."""
    X = dc.as_tensor(X)
    if X.shape[1] != spec.widths[0]:
        raise ShapeError(f"input has {X.shape[1]} features, model expects {spec.widths[0]}")
    if theta_row.shape != (1, param_count(spec)):
        raise ShapeError(f"theta row shape {theta_row.shape}, expected (1, {param_count(spec)})")
    h = X
    entries = layout(spec)
    n_layers = len(entries) // 2
    for ew, eb in zip(entries[0::2], entries[1::2]):
        w = dc.reshape(dc.slice(theta_row, cols=(ew.offset, ew.offset + ew.size)), ew.shape)
        b = dc.slice(theta_row, cols=(eb.offset, eb.offset + eb.size))
        h = dc.add(dc.matmul(h, w), b)
        if ew.layer < n_layers - 1:
            h = _activate(h, spec.hidden_activation)
    return h


def task_loss(logits: Tensor, spec: MlpSpec, Y) -> Tensor:
    """BCE for binary tasks (computed from logits), MSE for regression."""
    if spec.task == "binary":
        return dc.binary_cross_entropy_with_logits(logits, Y)
    out = dc.sigmoid(logits) if spec.output_activation == "sigmoid" else logits
    return dc.mse_loss(out, Y)


def batched_task_loss(thetas: Tensor, spec: MlpSpec, X3: np.ndarray, Y3: np.ndarray) -> Tensor:
    """Task loss of each row of ``thetas`` (B x P) on its own dataset, as a B x 1 column.

    ``X3`` is B x N x d and ``Y3`` is B x N x 1 (equal sample counts).  One fused
    node; matches stacking :func:`task_loss` of :func:`forward_logits` per row.
    """
    B, P = thetas.shape
    if P != param_count(spec):
        raise ShapeError(f"theta rows have {P} entries, expected {param_count(spec)}")
    if X3.ndim != 3 or X3.shape[0] != B or X3.shape[2] != spec.widths[0]:
        raise ShapeError(f"batched inputs shape {X3.shape} do not fit {B} models of width {spec.widths[0]}")
    entries = layout(spec)
    th = thetas.data
    Ws = [th[:, e.offset:e.offset + e.size].reshape(B, *e.shape) for e in entries[0::2]]
    bs = [th[:, e.offset:e.offset + e.size].reshape(B, 1, -1) for e in entries[1::2]]
    hidden = spec.hidden_activation
    acts = [X3]     # inputs to each layer
    pre = []        # hidden pre-activations
    h = X3
    for k in range(len(Ws)):
        a = np.matmul(h, Ws[k]) + bs[k]
        if k < len(Ws) - 1:
            pre.append(a)
            h = np.maximum(a, 0.0) if hidden == "relu" else (np.tanh(a) if hidden == "tanh" else a)
            acts.append(h)
        else:
            logits = a
    n = Y3.shape[1] * Y3.shape[2]
    if spec.task == "binary":
        x = logits
        vals = np.mean(np.maximum(x, 0.0) - x * Y3 + np.log1p(np.exp(-np.abs(x))), axis=(1, 2))
        dlogits = (dc._sigmoid(x) - Y3) / n
    else:
        out = dc._sigmoid(logits) if spec.output_activation == "sigmoid" else logits
        diff = out - Y3
        vals = np.mean(diff * diff, axis=(1, 2))
        dout = 2.0 * diff / n
        if spec.output_activation == "sigmoid":
            dlogits = dout * out * (1.0 - out)
        else:
            dlogits = dout

    def back(g, acc):
        gth = np.empty((B, P))
        d = dlogits * g.reshape(B, 1, 1)
        for k in range(len(Ws) - 1, -1, -1):
            ew, eb = entries[2 * k], entries[2 * k + 1]
            gth[:, ew.offset:ew.offset + ew.size] = np.matmul(np.swapaxes(acts[k], 1, 2), d).reshape(B, -1)
            gth[:, eb.offset:eb.offset + eb.size] = d.sum(axis=1)
            if k > 0:
                d = np.matmul(d, np.swapaxes(Ws[k], 1, 2))
                if hidden == "relu":
                    d = d * (pre[k - 1] > 0.0)
                elif hidden == "tanh":
                    d = d * (1.0 - acts[k] * acts[k])
        acc(thetas, gth)
    return dc.custom_op("batched_task_loss", vals.reshape(B, 1), (thetas,), back)


def predict(params: FlatParams, X) -> np.ndarray:
    """Forward pass; binary tasks return probabilities in (0, 1)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != params.spec.widths[0]:
        raise ShapeError(f"input shape {X.shape}, model expects {params.spec.widths[0]} features")
    h = X
    layers = unflatten(params)
    for k, (w, b) in enumerate(layers):
        h = h @ w + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0.0) if params.spec.hidden_activation == "relu" else np.tanh(h)
    if params.spec.output_activation == "sigmoid":
        return dc._sigmoid(h)
    return h


# ---------------------------------------------------------------------------
# generic dense stacks (autoencoder halves, dynamics nets)

class DenseStack:
    """Dense layers with relu between them and a linear last layer."""

    def __init__(self, widths: Sequence[int], seed: int | np.random.Generator = 0,
                 layers: Sequence[tuple[np.ndarray, np.ndarray]] | None = None):
        self.widths = tuple(int(w) for w in widths)
        if len(self.widths) < 2:
            raise ValueError(f"DenseStack needs at least two widths, got {self.widths}")
        if layers is None:
            rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
            layers = init_mlp(self.widths, rng)
        self.layers = [(np.ascontiguousarray(w, dtype=np.float64),
                        np.ascontiguousarray(np.reshape(b, (1, -1)), dtype=np.float64))
                       for w, b in layers]
        for (w, b), a, c in zip(self.layers, self.widths[:-1], self.widths[1:]):
            if w.shape != (a, c) or b.shape != (1, c):
                raise ShapeError(f"dense layer shapes W{w.shape} b{b.shape} do not match widths {a}->{c}")

    def arrays(self) -> list[np.ndarray]:
        return [a for wb in self.layers for a in wb]

    def leaves(self, tape: dc.Tape, trainable: bool = True) -> list[tuple[Tensor, Tensor]]:
        return [(tape.leaf(w, trainable), tape.leaf(b, trainable)) for w, b in self.layers]

    def __call__(self, x, leaves=None) -> Tensor:
        x = dc.as_tensor(x)
        if x.shape[1] != self.widths[0]:
            raise ShapeError(f"dense stack expects {self.widths[0]} inputs, got shape {x.shape}")
        layers = leaves if leaves is not None else self.layers
        for k, (w, b) in enumerate(layers):
            x = dc.add(dc.matmul(x, w), b)
            if k < len(layers) - 1:
                x = dc.relu(x)
        return x

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        for k, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if k < len(self.layers) - 1:
                x = np.maximum(x, 0.0)
        return x


@dataclass(frozen=True)
class AutoencoderSpec:
    n_params: int
    hidden: tuple[int, ...] = (1024, 512, 128)
    latent: int = 32

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.n_params <= 0 or self.latent <= 0 or any(h <= 0 for h in self.hidden):
            raise ValueError(f"invalid autoencoder dimensions {self}")

    @property
    def encoder_widths(self) -> tuple[int, ...]:
        return (self.n_params, *self.hidden, self.latent)

    @property
    def decoder_widths(self) -> tuple[int, ...]:
        return tuple(reversed(self.encoder_widths))


class Autoencoder:
    """Encoder phi: R^P -> R^n and decoder phi^-1: R^n -> R^P."""

    def __init__(self, spec: AutoencoderSpec, seed: int | np.random.Generator = 0,
                 encoder: DenseStack | None = None, decoder: DenseStack | None = None):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.spec = spec
        self.encoder = encoder or DenseStack(spec.encoder_widths, rng)
        self.decoder = decoder or DenseStack(spec.decoder_widths, rng)
        if self.encoder.widths != spec.encoder_widths or self.decoder.widths != spec.decoder_widths:
            raise ShapeError("autoencoder stacks do not match the AutoencoderSpec widths")

    @classmethod
    def identity(cls, n_params: int) -> "Autoencoder":
        """Single linear identity layer each way: phi and phi^-1 are exact identities."""
        spec = AutoencoderSpec(n_params, (), n_params)
        eye = [(np.eye(n_params), np.zeros((1, n_params)))]
        return cls(spec, encoder=DenseStack(spec.encoder_widths, layers=eye),
                   decoder=DenseStack(spec.decoder_widths, layers=eye))

    def arrays(self) -> list[np.ndarray]:
        return self.encoder.arrays() + self.decoder.arrays()

    def encode(self, theta) -> np.ndarray:
        t = np.atleast_2d(theta.theta if isinstance(theta, FlatParams) else theta)
        if t.shape[1] != self.spec.n_params:
            raise ShapeError(f"encoder expects {self.spec.n_params} parameters, got {t.shape[1]}")
        return self.encoder.apply(t)

    def decode(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        if z.shape[1] != self.spec.latent:
            raise ShapeError(f"decoder expects latent dim {self.spec.latent}, got {z.shape[1]}")
        return self.decoder.apply(z)


def encode(ae: Autoencoder, theta: FlatParams) -> np.ndarray:
    return ae.encode(theta)[0]


def decode(ae: Autoencoder, z, spec: MlpSpec) -> FlatParams:
    return FlatParams(ae.decode(z)[0], spec)


# ---------------------------------------------------------------------------
# Koopman operator

@dataclass
class OperatorSpec:
    """Trainable parameterisation of the latent generator matrix.

    full: K stored directly; skew: K = B - B^T; lowrank: K = U V^T;
    mlp-dynamics: nonlinear field z -> W2^T relu(W1^T z) (no matrix form).
    """

    kind: str = "full"
    dim: int = 32
    rank: int | None = None
    hidden: int = 64
    mats: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ValueError(f"unknown operator kind {self.kind!r}; choose from {OPERATOR_KINDS}")
        if self.dim <= 0:
            raise ValueError("operator dim must be positive")
        if self.kind == "lowrank" and not (self.rank and 0 < self.rank <= self.dim):
            raise ValueError(f"lowrank operator needs 0 < rank <= {self.dim}, got {self.rank}")
        for name, shape in self.shapes().items():
            if name in self.mats:
                self.mats[name] = np.ascontiguousarray(self.mats[name], dtype=np.float64)
                if self.mats[name].shape != shape:
                    raise ShapeError(f"operator matrix {name} has shape {self.mats[name].shape}, expected {shape}")

    def shapes(self) -> dict[str, tuple[int, int]]:
        n = self.dim
        if self.kind == "full":
            return {"K": (n, n)}
        if self.kind == "skew":
            return {"B": (n, n)}
        if self.kind == "lowrank":
            return {"U": (n, self.rank), "V": (n, self.rank)}
        return {"W1": (n, self.hidden), "W2": (self.hidden, n)}

    @property
    def is_linear(self) -> bool:
        return self.kind != "mlp-dynamics"

    def init(self, seed: int | np.random.Generator = 0, scale: float = 0.01,
             method: str = "normal") -> "OperatorSpec":
        """``normal``: entries scale * N(0, 1).  ``spread``: the generator starts
        as a random skew-symmetric matrix with spectral radius ``scale``, so its
        purely imaginary eigenvalues cover a band of rotation frequencies."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        if method not in ("normal", "spread"):
            raise ValueError(f"unknown operator init {method!r}")
        for name, shape in self.shapes().items():
            if name.startswith("W"):
                self.mats[name] = glorot_uniform(rng, *shape)
            else:
                self.mats[name] = scale * rng.standard_normal(shape)
        if method == "spread" and self.is_linear:
            A = rng.standard_normal((self.dim, self.dim))
            S = A - A.T
            S *= scale / max(float(np.abs(np.linalg.eigvals(S)).max()), 1e-300)
            if self.kind == "full":
                self.mats["K"] = S
            elif self.kind == "skew":
                self.mats["B"] = 0.5 * S
            else:
                # best rank-r approximation keeps the largest frequencies
                U, sv, Vt = np.linalg.svd(S)
                r = self.rank
                self.mats["U"] = U[:, :r] * np.sqrt(sv[:r])
                self.mats["V"] = Vt[:r].T * np.sqrt(sv[:r])
        return self

    def arrays(self) -> list[np.ndarray]:
        return [self.mats[k] for k in self.shapes()]


def materialize_operator(op: OperatorSpec, leaves: dict[str, Tensor] | None = None):
    """The n x n generator.  With ``leaves`` the result is a differentiable Tensor,
    otherwise a numpy array."""
    if not op.is_linear:
        raise ValueError("mlp-dynamics operators have no matrix form")
    if leaves is None:
        m = op.mats
        if op.kind == "full":
            return m["K"].copy()
        if op.kind == "skew":
            return m["B"] - m["B"].T
        return m["U"] @ m["V"].T
    if op.kind == "full":
        return leaves["K"]
    if op.kind == "skew":
        return dc.sub(leaves["B"], dc.transpose(leaves["B"]))
    return dc.matmul(leaves["U"], dc.transpose(leaves["V"]))


def mlp_field(op: OperatorSpec, leaves: dict[str, Tensor] | None = None):
    """Row-wise latent vector field for the mlp-dynamics operator."""
    w1 = leaves["W1"] if leaves else op.mats["W1"]
    w2 = leaves["W2"] if leaves else op.mats["W2"]

    def f(z, t=None):
        return dc.matmul(dc.relu(dc.matmul(z, w1)), w2)
    return f


# ---------------------------------------------------------------------------
# direct parameter dynamics (no Koopman space)

class DirectDynamics:
    """h(theta, t): R^(P+1) -> R^P, a dense stack on [theta, t]."""

    def __init__(self, n_params: int, hidden: Sequence[int] = (64,),
                 seed: int | np.random.Generator = 0, zero: bool = False,
                 stack: DenseStack | None = None):
        self.n_params = n_params
        self.net = stack or DenseStack((n_params + 1, *hidden, n_params), seed)
        if self.net.widths[0] != n_params + 1 or self.net.widths[-1] != n_params:
            raise ShapeError(f"dynamics net widths {self.net.widths} do not fit P={n_params}")
        if zero:
            for w, b in self.net.layers:
                w[...] = 0.0
                b[...] = 0.0
        else:
            # small output layer keeps early integrated drift bounded
            self.net.layers[-1][0][...] *= 0.01

    def arrays(self) -> list[np.ndarray]:
        return self.net.arrays()

    def field(self, leaves=None):
        def f(theta, t):
            theta = dc.as_tensor(theta)
            tcol = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1, 1), (theta.shape[0], 1))
            return self.net(dc.concat([theta, Tensor(tcol)], axis=1), leaves)
        return f


def direct_dynamics(h_net: DirectDynamics, theta: FlatParams | np.ndarray, t: float) -> np.ndarray:
    th = theta.theta if isinstance(theta, FlatParams) else np.asarray(theta, dtype=np.float64)
    th = th.reshape(1, -1)
    if th.shape[1] != h_net.n_params:
        raise ShapeError(f"dynamics net expects {h_net.n_params} parameters, got {th.shape[1]}")
    return h_net.field()(Tensor(th), t).data[0].copy()
