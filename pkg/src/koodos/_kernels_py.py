"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""
import math

import numpy as np


def adam_update(p, g, m, v, lr, beta1, beta2, eps, step):
    n = p.shape[0]
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam_update: buffer lengths differ")
    step_size = lr / (1.0 - beta1 ** step)
    root_c2 = math.sqrt(1.0 - beta2 ** step)
    # same association order as the compiled loop, so results match bitwise
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    denom = np.sqrt(v)
    denom /= root_c2
    denom += eps
    upd = step_size * m
    upd /= denom
    p -= upd
