"""Reference computations used by the tests, written independently of the package."""
import numpy as np


def central_diff(f, arrays, h=1e-5):
    """Central finite differences of scalar f(*arrays) with respect to each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def max_rel_err(analytic, numeric, floor=1e-6):
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def bce(p, y):
    return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))


def mlp_forward(layers, X, hidden="relu"):
    h = X
    for k, (W, b) in enumerate(layers):
        h = h @ W + b
        if k < len(layers) - 1:
            h = np.maximum(h, 0) if hidden == "relu" else np.tanh(h)
    return h


def faddeev_leverrier(M):
    """Characteristic polynomial coefficients [1, c1, ..., cn] of M, highest power first."""
    n = M.shape[0]
    coeffs = [1.0]
    Mk = np.zeros_like(M)
    I = np.eye(n)
    for k in range(1, n + 1):
        Mk = M @ Mk + coeffs[-1] * I
        coeffs.append(-np.trace(M @ Mk) / k)
    return coeffs
