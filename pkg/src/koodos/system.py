"""Joint training of per-domain models and their latent linear dynamics.

A trained :class:`KoodosSystem` holds one parameter vector per training domain,
an autoencoder between parameter space and a latent space, and a generator
matrix ``K`` for dz/dt = K z.  A model for any time ``s`` is obtained by encoding
the parameters of an anchor domain, flowing the latent state to ``s`` and
decoding.

Objective (all sums, pairs j < i from the pair schedule)::

    alpha * (L_intri + L_integ) + beta * (L_recon + L_consis) + gamma * L_dyna
"""
from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from koodos import diffcore as dc
from koodos import nets, odeflow
from koodos.diffcore import Tensor
from koodos.domains import Domain, DomainSequence
from koodos.nets import Autoencoder, AutoencoderSpec, DirectDynamics, FlatParams, MlpSpec, OperatorSpec

log = logging.getLogger(__name__)

LOSS_TERMS = ("L_intri", "L_integ", "L_recon", "L_dyna", "L_consis")
SCHEDULES = ("all-pairs", "window", "chain")
EARLY_STOP_SMOOTH = 10
ABLATIONS = ("no_integ", "no_recon", "no_dyna", "no_consis", "no_koopman")


@dataclass
class KoodosConfig:
    alpha: float = 1.0
    beta: float = 100.0
    gamma: float = 10.0
    lr_model: float = 1e-2
    lr_other: float = 1e-3
    warm_epochs: int = 200
    joint_epochs: int = 500
    pair_schedule: str = "all-pairs"
    window: int = 1
    pair_batch: int | None = 32
    instance_batch: int | None = 256
    ablations: tuple[str, ...] = ()
    operator: str = "full"
    operator_rank: int | None = None
    operator_hidden: int = 64
    operator_init_scale: float = 1.0
    operator_init: str = "spread"
    ae_hidden: tuple[int, ...] = (1024, 512, 128)
    latent_dim: int = 32
    dynamics_hidden: tuple[int, ...] = (64,)
    integration: odeflow.IntegrationConfig = field(default_factory=odeflow.IntegrationConfig)
    warm_start: str = "independent"
    dynamics_warmup: int = 200
    reduction: str = "sum"
    anchor: str = "latest"
    early_stop_patience: int = 50
    early_stop_tol: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.ablations = tuple(self.ablations)
        self.ae_hidden = tuple(self.ae_hidden)
        self.dynamics_hidden = tuple(self.dynamics_hidden)
        if isinstance(self.integration, dict):
            self.integration = odeflow.IntegrationConfig(**self.integration)
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.warm_epochs < 1 or self.joint_epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.pair_schedule not in SCHEDULES:
            raise ValueError(f"pair_schedule must be one of {SCHEDULES}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.pair_batch is not None and self.pair_batch < 1:
            raise ValueError("pair_batch must be >= 1 or None")
        if self.instance_batch is not None and self.instance_batch < 1:
            raise ValueError("instance_batch must be >= 1 or None")
        bad = set(self.ablations) - set(ABLATIONS)
        if bad:
            raise ValueError(f"unknown ablation flags {sorted(bad)}")
        if self.warm_start not in ("chain", "independent"):
            raise ValueError("warm_start must be 'chain' or 'independent'")
        if self.reduction not in ("sum", "mean"):
            raise ValueError("reduction must be 'sum' or 'mean'")
        if self.dynamics_warmup < 0:
            raise ValueError("dynamics_warmup must be >= 0")
        if self.anchor not in ("latest", "nearest"):
            raise ValueError("anchor must be 'latest' or 'nearest'")
        if self.lr_model <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablations"] = list(self.ablations)
        d["ae_hidden"] = list(self.ae_hidden)
        d["dynamics_hidden"] = list(self.dynamics_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "KoodosConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown koodos config fields {sorted(unknown)}")
        return cls(**d)


@dataclass
class KoodosSystem:
    timestamps: np.ndarray
    thetas: np.ndarray                  # T x P
    spec: MlpSpec
    config: KoodosConfig
    ae: Autoencoder | None = None
    operator: OperatorSpec | None = None
    dynamics: DirectDynamics | None = None
    history: list[dict] = field(default_factory=list)
    baselines: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        self.thetas = np.ascontiguousarray(np.atleast_2d(self.thetas), dtype=np.float64)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("system timestamps must be strictly increasing")
        if self.thetas.shape[0] != self.timestamps.size:
            raise ValueError(f"{self.thetas.shape[0]} parameter vectors for {self.timestamps.size} timestamps")

    @property
    def T(self) -> int:
        return self.timestamps.size

    @property
    def koopman(self) -> bool:
        return self.ae is not None and self.operator is not None

    def theta(self, i: int) -> FlatParams:
        return FlatParams(self.thetas[i].copy(), self.spec)

    def K(self) -> np.ndarray:
        return nets.materialize_operator(self.operator)


# ---------------------------------------------------------------------------
# pair schedules

def pair_schedule(T: int, schedule: str = "all-pairs", window: int = 1) -> np.ndarray:
    """(j, i) index pairs with j < i, as an array of shape (n_pairs, 2)."""
    if schedule == "all-pairs":
        pairs = [(j, i) for i in range(T) for j in range(i)]
    elif schedule == "window":
        pairs = [(j, i) for i in range(T) for j in range(max(0, i - window), i)]
    elif schedule == "chain":
        pairs = [(i - 1, i) for i in range(1, T)]
    else:
        raise ValueError(f"unknown pair schedule {schedule!r}")
    return np.array(pairs, dtype=np.intp).reshape(-1, 2)


# ---------------------------------------------------------------------------
# per-domain ERM

def _as_domains(domains) -> list[Domain]:
    return list(domains.domains if isinstance(domains, DomainSequence) else domains)


def erm_pretrain(domain: Domain, spec: MlpSpec, epochs: int = 200, lr: float = 1e-2,
                 seed: int = 0, init: FlatParams | np.ndarray | None = None) -> FlatParams:
    """Full-batch Adam on the task loss of one domain."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if domain is None or len(domain) == 0:
        raise ValueError("cannot train on an empty domain")
    if init is None:
        theta = nets.init_params(spec, seed).theta.reshape(1, -1)
    else:
        theta = np.array(getattr(init, "theta", init), dtype=np.float64).reshape(1, -1)
    opt = dc.Adam([theta], lr=lr)
    X, Y = dc.Tensor(domain.X), dc.Tensor(domain.Y)
    for _ in range(epochs):
        tape = dc.Tape()
        th = tape.leaf(theta)
        loss = nets.task_loss(nets.forward_logits(th, spec, X), spec, Y)
        opt.step([dc.backward(loss)[th]])
        tape.release()
    return FlatParams(theta[0].copy(), spec)


def _pooled(domains: Sequence[Domain]) -> Domain:
    return Domain(domains[-1].t, np.vstack([d.X for d in domains]),
                  np.vstack([d.Y for d in domains]), domains[-1].task)


def baseline_offline(domains, spec: MlpSpec | None = None, epochs: int = 200,
                     lr: float = 1e-2, seed: int = 0) -> FlatParams:
    doms = _as_domains(domains)
    spec = spec or default_spec(doms)
    return erm_pretrain(_pooled(doms), spec, epochs, lr, seed)


def baseline_lastdomain(domains, spec: MlpSpec | None = None, epochs: int = 200,
                        lr: float = 1e-2, seed: int = 0) -> FlatParams:
    doms = _as_domains(domains)
    spec = spec or default_spec(doms)
    return erm_pretrain(doms[-1], spec, epochs, lr, seed)


def default_spec(domains: Sequence[Domain], hidden: Sequence[int] = (50, 50, 50)) -> MlpSpec:
    return MlpSpec.for_task(domains[0].X.shape[1], hidden, domains[0].task)


# ---------------------------------------------------------------------------
# losses

class _Leaves:
    """Graph inputs for one evaluation of the objective.  With ``tape=None``
    everything is a plain constant and ops just evaluate."""

    def __init__(self, system: KoodosSystem, tape: dc.Tape | None, theta_trainable: bool = True):
        def leaf(a, trainable=True):
            return tape.leaf(a, trainable) if tape is not None else Tensor(a, _copy=False)
        self.theta = leaf(system.thetas, theta_trainable)
        self.enc = self.dec = None
        self.op: dict[str, Tensor] = {}
        self.dyn = None
        if system.ae is not None:
            self.enc = [(leaf(w), leaf(b)) for w, b in system.ae.encoder.layers]
            self.dec = [(leaf(w), leaf(b)) for w, b in system.ae.decoder.layers]
        if system.operator is not None:
            self.op = {k: leaf(v) for k, v in system.operator.mats.items()}
        if system.dynamics is not None:
            self.dyn = [(leaf(w), leaf(b)) for w, b in system.dynamics.net.layers]

    def arrays_and_leaves(self, system: KoodosSystem):
        pairs = []
        if self.enc is not None:
            for (w, b), (lw, lb) in zip(system.ae.encoder.layers + system.ae.decoder.layers,
                                        self.enc + self.dec):
                pairs += [(w, lw), (b, lb)]
        if system.operator is not None:
            pairs += [(system.operator.mats[k], self.op[k]) for k in system.operator.shapes()]
        if self.dyn is not None:
            for (w, b), (lw, lb) in zip(system.dynamics.net.layers, self.dyn):
                pairs += [(w, lw), (b, lb)]
        return pairs


class _Objective:
    """Builds the loss terms for a system, sharing intermediate nodes."""

    def __init__(self, system: KoodosSystem, domains: Sequence[Domain], leaves: _Leaves,
                 data: tuple[np.ndarray, np.ndarray] | None = None):
        self.s = system
        self.doms = domains
        self.lv = leaves
        self._z = None
        self._Xs = [Tensor(d.X, _copy=False) for d in domains]
        self._Ys = [Tensor(d.Y, _copy=False) for d in domains]
        self._X3 = self._Y3 = None
        if data is not None:
            self._X3, self._Y3 = data
        elif domains and len({d.X.shape for d in domains}) == 1:
            self._X3 = np.stack([d.X for d in domains])
            self._Y3 = np.stack([d.Y for d in domains])

    # components -------------------------------------------------------------
    def z(self) -> Tensor:
        if self._z is None:
            self._z = self.s.ae.encoder(self.lv.theta, self.lv.enc)
        return self._z

    def decode(self, z: Tensor) -> Tensor:
        return self.s.ae.decoder(z, self.lv.dec)

    def flow_latent(self, z0: Tensor, t0: np.ndarray, t1: np.ndarray) -> Tensor:
        op = self.s.operator
        cfg = self.s.config.integration
        if op.is_linear:
            K = nets.materialize_operator(op, self.lv.op)
            if cfg.method == "expm":
                return odeflow.expm_action(K, z0, t1 - t0, cfg.tol)
            return odeflow.integrate_field(odeflow.linear_field(K), z0, t0, t1, cfg)
        return odeflow.integrate_field(nets.mlp_field(op, self.lv.op), z0, t0, t1,
                                       replace(cfg, method="rk4"))

    def predicted(self, pairs: np.ndarray) -> tuple[Tensor | None, Tensor]:
        """Latent (None without Koopman space) and parameter predictions j -> i."""
        ts = self.s.timestamps
        j, i = pairs[:, 0], pairs[:, 1]
        if self.s.koopman:
            zhat = self.flow_latent(dc.take_rows(self.z(), j), ts[j], ts[i])
            return zhat, self.decode(zhat)
        field_fn = self.s.dynamics.field(self.lv.dyn)
        cfg = replace(self.s.config.integration, method="rk4")
        return None, odeflow.integrate_field(field_fn, dc.take_rows(self.lv.theta, j), ts[j], ts[i], cfg)

    def task(self, theta_row: Tensor, k: int) -> Tensor:
        logits = nets.forward_logits(theta_row, self.s.spec, self._Xs[k])
        return nets.task_loss(logits, self.s.spec, self._Ys[k])

    def task_sum(self, thetas: Tensor, idx: np.ndarray) -> Tensor:
        """Sum over rows r of the task loss of thetas[r] on domain idx[r]."""
        if self._X3 is not None:
            return dc.sum(nets.batched_task_loss(thetas, self.s.spec, self._X3[idx], self._Y3[idx]))
        return _sum_scalars([self.task(dc.slice(thetas, rows=(r, r + 1)), int(k))
                             for r, k in enumerate(idx)])

    # terms -------------------------------------------------------------------
    def intri(self) -> Tensor:
        return self.task_sum(self.lv.theta, np.arange(self.s.T))

    def recon(self) -> Tensor:
        return dc.sum(dc.row_l2_distance(self.lv.theta, self.decode(self.z())))

    def pair_terms(self, pairs: np.ndarray, want: set[str]) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if len(pairs) == 0:
            return {k: Tensor(0.0) for k in want}
        zhat, thhat = self.predicted(pairs)
        i = pairs[:, 1]
        if "L_dyna" in want:
            out["L_dyna"] = (dc.sum(dc.row_l2_distance(dc.take_rows(self.z(), i), zhat))
                             if zhat is not None else Tensor(0.0))
        if "L_consis" in want:
            out["L_consis"] = dc.sum(dc.row_l2_distance(dc.take_rows(self.lv.theta, i), thhat))
        if "L_integ" in want:
            out["L_integ"] = self.task_sum(thhat, i)
        return out


def _sum_scalars(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    return dc.sum(dc.concat(terms, axis=0))


def _active_terms(cfg: KoodosConfig, koopman: bool) -> set[str]:
    want = {"L_intri", "L_integ", "L_recon", "L_dyna", "L_consis"}
    if not koopman:
        want -= {"L_recon", "L_dyna"}
    for flag, term in (("no_integ", "L_integ"), ("no_recon", "L_recon"),
                       ("no_dyna", "L_dyna"), ("no_consis", "L_consis")):
        if cfg.has(flag):
            want.discard(term)
    return want


def _weights(cfg: KoodosConfig) -> dict[str, float]:
    return {"L_intri": cfg.alpha, "L_integ": cfg.alpha, "L_recon": cfg.beta,
            "L_dyna": cfg.gamma, "L_consis": cfg.beta}


def _build(system: KoodosSystem, domains, pairs, tape, want, pair_scale: float = 1.0,
           domain_scale: float = 1.0, data=None, theta_trainable: bool = True):
    leaves = _Leaves(system, tape, theta_trainable)
    obj = _Objective(system, domains, leaves, data)
    terms: dict[str, Tensor] = {}
    if "L_intri" in want:
        terms["L_intri"] = obj.intri()
    if "L_recon" in want:
        terms["L_recon"] = obj.recon()
    if domain_scale != 1.0:
        for k in list(terms):
            terms[k] = dc.scale(terms[k], domain_scale)
    pair_want = want & {"L_dyna", "L_consis", "L_integ"}
    if pair_want:
        for k, v in obj.pair_terms(pairs, pair_want).items():
            terms[k] = dc.scale(v, pair_scale) if pair_scale != 1.0 else v
    w = _weights(system.config)
    parts = [dc.scale(terms[k], w[k]) for k in LOSS_TERMS if k in terms]
    total = _sum_scalars(parts)
    return leaves, terms, total


def _check_domains(system: KoodosSystem, domains) -> list[Domain]:
    doms = _as_domains(domains)
    if len(doms) != system.T:
        raise ValueError(f"{len(doms)} domains for a system with {system.T} parameter vectors")
    return doms


def loss_terms(system: KoodosSystem, domains, pairs: np.ndarray | None = None) -> dict[str, float]:
    """All five terms and the weighted total, evaluated over the full schedule."""
    doms = _check_domains(system, domains)
    cfg = system.config
    if pairs is None:
        pairs = pair_schedule(system.T, cfg.pair_schedule, cfg.window)
    want = set(LOSS_TERMS) if system.koopman else {"L_intri", "L_integ", "L_consis"}
    _, terms, _ = _build(system, doms, pairs, None, want)
    out = {k: (terms[k].item() if k in terms else 0.0) for k in LOSS_TERMS}
    active = _active_terms(cfg, system.koopman)
    w = _weights(cfg)
    out["combined"] = math.fsum(w[k] * out[k] for k in LOSS_TERMS if k in active)
    return out


def loss_intri(system: KoodosSystem, domains) -> float:
    doms = _check_domains(system, domains)
    return _Objective(system, doms, _Leaves(system, None)).intri().item()


def loss_recon(system: KoodosSystem) -> float:
    return _Objective(system, [], _Leaves(system, None)).recon().item()


def _pair_term(system, domains, pairs, name) -> float:
    cfg = system.config
    if pairs is None:
        pairs = pair_schedule(system.T, cfg.pair_schedule, cfg.window)
    pairs = np.asarray(pairs, dtype=np.intp).reshape(-1, 2)
    obj = _Objective(system, domains, _Leaves(system, None))
    return obj.pair_terms(pairs, {name})[name].item()


def loss_dyna(system: KoodosSystem, pairs: np.ndarray | None = None) -> float:
    return _pair_term(system, [], pairs, "L_dyna")


def loss_consis(system: KoodosSystem, pairs: np.ndarray | None = None) -> float:
    return _pair_term(system, [], pairs, "L_consis")


def loss_integ(system: KoodosSystem, domains, pairs: np.ndarray | None = None) -> float:
    return _pair_term(system, _check_domains(system, domains), pairs, "L_integ")


# ---------------------------------------------------------------------------
# training

def warm_start(domains: Sequence[Domain], spec: MlpSpec, cfg: KoodosConfig) -> np.ndarray:
    """Per-domain ERM.  ``chain`` initialises each domain from its predecessor,
    which keeps consecutive parameter vectors in the same basin."""
    thetas = []
    prev = None
    for k, d in enumerate(domains):
        init = prev if cfg.warm_start == "chain" else None
        th = erm_pretrain(d, spec, cfg.warm_epochs, cfg.lr_model, cfg.seed, init=init)
        thetas.append(th.theta)
        prev = th
    return np.vstack(thetas)


def new_system(timestamps, thetas, spec: MlpSpec, cfg: KoodosConfig) -> KoodosSystem:
    """Untrained dynamics components around given parameter vectors."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    P = nets.param_count(spec)
    system = KoodosSystem(timestamps, thetas, spec, cfg)
    if cfg.has("no_koopman"):
        system.dynamics = DirectDynamics(P, cfg.dynamics_hidden, rng)
    else:
        system.ae = Autoencoder(AutoencoderSpec(P, cfg.ae_hidden, cfg.latent_dim), rng)
        op = OperatorSpec(cfg.operator, cfg.latent_dim, cfg.operator_rank, cfg.operator_hidden)
        system.operator = op.init(rng, cfg.operator_init_scale, cfg.operator_init)
    return system


def warmup_epochs(cfg: KoodosConfig) -> int:
    """Leading joint epochs that train only the transforms and the operator,
    capped at 40% of the joint phase so short runs still refine parameters."""
    return min(cfg.dynamics_warmup, (2 * cfg.joint_epochs) // 5)


def train_joint(domains, config: KoodosConfig | None = None, spec: MlpSpec | None = None,
                callback=None) -> KoodosSystem:
    """Warm-start every domain model, then optimise all components jointly."""
    cfg = config or KoodosConfig()
    doms = _as_domains(domains)
    if not doms:
        raise ValueError("need at least one domain")
    ts = np.array([d.t for d in doms])
    if np.any(np.diff(ts) <= 0):
        raise ValueError("domain timestamps must be strictly increasing")
    spec = spec or default_spec(doms)
    t0 = time.perf_counter()
    thetas = warm_start(doms, spec, cfg)
    system = new_system(ts, thetas, spec, cfg)
    log.info("warm start: %d domains in %.1fs", len(doms), time.perf_counter() - t0)
    if len(doms) == 1:
        warnings.warn("no dynamics learnable from a single domain; returning its ERM model",
                      stacklevel=2)
        return system

    all_pairs = pair_schedule(len(doms), cfg.pair_schedule, cfg.window)
    want = _active_terms(cfg, system.koopman)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))
    opt_theta = dc.Adam([system.thetas], lr=cfg.lr_model)
    other = _Leaves(system, dc.Tape()).arrays_and_leaves(system)
    opt_other = dc.Adam([a for a, _ in other], lr=cfg.lr_other)

    stacked = None
    if cfg.instance_batch is not None and len({d.X.shape for d in doms}) == 1 \
            and cfg.instance_batch < len(doms[0]):
        stacked = (np.stack([d.X for d in doms]), np.stack([d.Y for d in doms]))
    mean = cfg.reduction == "mean"
    intri_frozen = 0.0
    if warmup_epochs(cfg) and "L_intri" in want:
        intri_frozen = loss_intri(system, doms) / (len(doms) if mean else 1.0)
    domain_scale = 1.0 / len(doms) if mean else 1.0
    best, since_best = math.inf, 0
    recent: list[float] = []
    n_warm = warmup_epochs(cfg)
    for epoch in range(cfg.joint_epochs):
        warmup = epoch < n_warm
        if cfg.pair_batch is not None and cfg.pair_batch < len(all_pairs):
            pick = np.sort(rng.choice(len(all_pairs), cfg.pair_batch, replace=False))
            pairs = all_pairs[pick]
            scale = 1.0 / cfg.pair_batch if mean else len(all_pairs) / cfg.pair_batch
        else:
            pairs, scale = all_pairs, (1.0 / len(all_pairs) if mean else 1.0)
        data = None
        if stacked is not None:
            sel = np.argsort(rng.random((len(doms), len(doms[0]))), axis=1)[:, :cfg.instance_batch]
            data = (np.take_along_axis(stacked[0], sel[:, :, None], axis=1),
                    np.take_along_axis(stacked[1], sel[:, :, None], axis=1))
        step_want = want - {"L_intri"} if warmup else want
        tape = dc.Tape()
        leaves, terms, total = _build(system, doms, pairs, tape, step_want, scale, domain_scale,
                                      data, theta_trainable=not warmup)
        grads = dc.backward(total)
        if not warmup:
            opt_theta.step([grads[leaves.theta]])
        opt_other.step([grads[leaf] for _, leaf in leaves.arrays_and_leaves(system)])
        del grads
        tape.release()
        row = {"epoch": epoch}
        row.update({k: (terms[k].item() if k in terms else 0.0) for k in LOSS_TERMS})
        row["combined"] = total.item()
        if warmup and "L_intri" in want:
            # parameters are frozen, so the task term keeps its warm-start value
            row["L_intri"] = intri_frozen
            row["combined"] += cfg.alpha * intri_frozen
        system.history.append(row)
        if callback is not None:
            callback(epoch, row)
        if warmup:
            continue
        # plateau test on a short moving average: subsampled pair losses are noisy
        recent = (recent + [row["combined"]])[-EARLY_STOP_SMOOTH:]
        smooth = math.fsum(recent) / len(recent)
        if smooth < best * (1.0 - cfg.early_stop_tol):
            best, since_best = smooth, 0
        else:
            since_best += 1
            if since_best >= cfg.early_stop_patience:
                log.info("early stop at epoch %d", epoch)
                break
    log.info("joint training: %d epochs in %.1fs", len(system.history), time.perf_counter() - t0)
    return system


# ---------------------------------------------------------------------------
# inference

def anchor_index(system: KoodosSystem, s: float) -> int:
    ts = system.timestamps
    if system.config.anchor == "nearest":
        return int(np.argmin(np.abs(ts - s)))
    k = int(np.searchsorted(ts, s, side="right")) - 1
    return max(k, 0)


def latent_state(system: KoodosSystem, s: float) -> tuple[np.ndarray, np.ndarray]:
    """(anchor latent state, latent state flowed to s)."""
    if not system.koopman:
        raise ValueError("system has no latent space")
    a = anchor_index(system, s)
    z0 = system.ae.encode(system.thetas[a])
    op = system.operator
    if op.is_linear:
        zs = odeflow.integrate_linear(system.K(), z0, system.timestamps[a], s, system.config.integration)
    else:
        zs = odeflow.integrate_field(nets.mlp_field(op), z0, system.timestamps[a], s,
                                     replace(system.config.integration, method="rk4")).data
    return z0[0], np.asarray(zs).reshape(-1)


def generalize(system: KoodosSystem, s: float) -> FlatParams:
    """Parameters for time ``s`` flowed from the anchor observation."""
    s = float(s)
    a = anchor_index(system, s)
    if system.T == 1:
        return system.theta(0)
    if system.koopman:
        _, zs = latent_state(system, s)
        return FlatParams(system.ae.decode(zs)[0], system.spec)
    f = system.dynamics.field()
    th = odeflow.integrate_field(f, system.thetas[a], system.timestamps[a], s,
                                 replace(system.config.integration, method="rk4"))
    return FlatParams(th.data[0].copy(), system.spec)


# ---------------------------------------------------------------------------
# metrics

def error_rate(prob: np.ndarray, y: np.ndarray) -> float:
    return float(100.0 * np.mean((np.ravel(prob) >= 0.5) != (np.ravel(y) >= 0.5)))


def mae(pred: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.abs(np.ravel(pred) - np.ravel(y))))


def auc(score: np.ndarray, y: np.ndarray) -> float:
    """ROC AUC via the rank-sum statistic with mid-ranks for ties."""
    score, y = np.ravel(score), np.ravel(y) >= 0.5
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")
    order = np.argsort(score, kind="mergesort")
    ranks = np.empty(score.size)
    sorted_s = score[order]
    i = 0
    while i < score.size:
        j = i
        while j + 1 < score.size and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


METRICS = {"error_rate": error_rate, "mae": mae, "auc": auc}


def score(params: FlatParams, domain: Domain, metric: str = "error_rate") -> float:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}")
    return METRICS[metric](nets.predict(params, domain.X), domain.Y)


def evaluate(system: KoodosSystem, test_domains, metric: str = "error_rate") -> dict:
    """Per-domain scores of generalized models and their mean."""
    doms = _as_domains(test_domains)
    per = [{"t": d.t, "metric": score(generalize(system, d.t), d, metric)} for d in doms]
    agg = float(np.mean([p["metric"] for p in per])) if per else float("nan")
    return {"metric": metric, "per_domain": per, "aggregate": agg}


def evaluate_static(params: FlatParams, test_domains, metric: str = "error_rate") -> dict:
    doms = _as_domains(test_domains)
    per = [{"t": d.t, "metric": score(params, d, metric)} for d in doms]
    agg = float(np.mean([p["metric"] for p in per])) if per else float("nan")
    return {"metric": metric, "per_domain": per, "aggregate": agg}


def default_metric(task: str) -> str:
    return "error_rate" if task == "binary" else "mae"


HISTORY_FIELDS = ("epoch",) + LOSS_TERMS + ("combined",)


def write_history_csv(history: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(HISTORY_FIELDS) + "\n")
        for row in history:
            fh.write(",".join([str(int(row["epoch"]))] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]]) + "\n")
