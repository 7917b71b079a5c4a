"""Small systems shared by the system, CLI and acceptance tests."""
import numpy as np

from koodos import diffcore as dc
from koodos import domains, nets, system as ks
from oracles import central_diff, max_rel_err


def tiny_config(**kw):
    base = dict(warm_epochs=30, joint_epochs=40, ae_hidden=(16,), latent_dim=4, pair_batch=None,
                instance_batch=None, dynamics_warmup=10, early_stop_patience=1000, seed=0)
    base.update(kw)
    return ks.KoodosConfig(**base)


TINY_SPEC = nets.MlpSpec((2, 8, 1))


def tiny_moons(T=5, n=20, seed=0, t_max=5.0):
    return domains.moons_sequence(T, 0.0, t_max, n_per_class=n, seed=seed)


def combined_loss_gradcheck(seed=0, operator="full"):
    """Max per-coordinate relative error of the combined objective's gradient
    (2 domains, 1 pair, expm flow) against central differences."""
    rng = np.random.default_rng(seed)
    doms = [domains.generate_moons_domain(t, 4, 0.1, seed + k) for k, t in enumerate((0.3, 1.4))]
    spec = nets.MlpSpec((2, 3, 1))
    cfg = ks.KoodosConfig(ae_hidden=(5,), latent_dim=3, operator=operator,
                          operator_rank=2 if operator == "lowrank" else None, seed=seed)
    thetas = 0.5 * rng.normal(size=(2, nets.param_count(spec)))
    system = ks.new_system([d.t for d in doms], thetas, spec, cfg)
    system.operator.mats = {k: 0.3 * rng.normal(size=v.shape) for k, v in system.operator.mats.items()}
    pairs = ks.pair_schedule(2)
    want = set(ks.LOSS_TERMS)

    tape = dc.Tape()
    leaves, _, total = ks._build(system, doms, pairs, tape, want)
    grads = dc.backward(total)
    targets = [(system.thetas, leaves.theta)] + leaves.arrays_and_leaves(system)

    def f(*_):
        return ks._build(system, doms, pairs, None, want)[2].item()

    worst = 0.0
    for arr, leaf in targets:
        num = central_diff(f, [arr])[0]
        worst = max(worst, max_rel_err(grads[leaf], num))
    return worst, len(pairs)
