"""Integration of latent and parameter dynamics.

The linear Koopman field is integrated exactly with a matrix exponential
(scaling and squaring around a truncated Taylor core).  Generic fields use
classical RK4 with uniform steps.  Both are differentiable: gradients are the
reverse sweep through the very steps that produced the forward value.

States are row vectors; a batch is a matrix with one state per row, and each
row may carry its own time interval.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from koodos import diffcore as dc
from koodos.diffcore import ShapeError, Tensor

Field = Callable[[Tensor, np.ndarray], Tensor]


@dataclass(frozen=True)
class IntegrationConfig:
    method: str = "expm"
    steps_per_unit: int = 5
    tol: float = 1e-12

    def __post_init__(self):
        if self.method not in ("expm", "rk4"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if self.steps_per_unit < 1:
            raise ValueError("steps_per_unit must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


# ---------------------------------------------------------------------------
# matrix exponential

_THETA = 0.5  # scaled 1-norm bound for the Taylor core


def _taylor_degree(tol: float) -> int:
    # remainder of exp on ||S|| <= theta is bounded by theta^(m+1)/(m+1)! * e^theta
    m, term = 1, _THETA
    while term * math.exp(_THETA) > tol:
        m += 1
        term *= _THETA / m
    return m


def _plan(norm: float, tol: float) -> tuple[int, int]:
    s = 0 if norm <= _THETA else int(math.ceil(math.log2(norm / _THETA)))
    return s, _taylor_degree(tol)


def _check_square(K: np.ndarray) -> None:
    if K.ndim != 2 or K.shape[0] != K.shape[1]:
        raise ShapeError(f"generator must be square, got shape {K.shape}")
    if not np.isfinite(K).all():
        raise FloatingPointError("generator has non-finite entries")


def expm(A, tol: float = 1e-12) -> np.ndarray:
    """exp(A) for a square matrix or a stack of them (last two axes)."""
    A = np.asarray(A, dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ShapeError(f"expm needs square matrices, got shape {A.shape}")
    if not np.isfinite(A).all():
        raise FloatingPointError("expm: non-finite entries")
    norm = float(np.abs(A).sum(axis=-2).max()) if A.size else 0.0
    s, m = _plan(norm, tol)
    S = A / 2.0 ** s
    eye = np.broadcast_to(np.eye(A.shape[-1]), A.shape)
    E = eye.copy()
    for k in range(m, 0, -1):  # Horner: I + S/1 (I + S/2 (... (I + S/m)))
        E = eye + (S @ E) / k
    for _ in range(s):
        E = E @ E
    return E


def expm_action(K, Z0, dts, tol: float = 1e-12) -> Tensor:
    """Rows ``exp(K * dts[p]) z_p`` for each row ``z_p`` of ``Z0`` (a Tensor op).

    One scaling power and Taylor degree are shared by the batch, so every row is
    computed to at least the requested tolerance.  The backward pass replays the
    Horner and squaring steps in reverse.
    """
    K, Z0 = dc.as_tensor(K), dc.as_tensor(Z0)
    _check_square(K.data)
    n = K.shape[0]
    dts = np.asarray(dts, dtype=np.float64).reshape(-1)
    if Z0.shape[1] != n:
        raise ShapeError(f"state width {Z0.shape[1]} does not match generator {K.shape}")
    if dts.size != Z0.shape[0]:
        raise ShapeError(f"{dts.size} time steps for {Z0.shape[0]} states")
    if not np.isfinite(dts).all():
        raise FloatingPointError("non-finite integration interval")
    kn = float(np.abs(K.data).sum(axis=0).max())
    s, m = _plan(kn * float(np.abs(dts).max(initial=0.0)), tol)
    scale = dts / 2.0 ** s
    S = scale[:, None, None] * K.data                  # (B, n, n)
    eye = np.eye(n)
    horner = [np.broadcast_to(eye, S.shape)]
    for k in range(m, 0, -1):
        horner.append(eye + (S @ horner[-1]) / k)
    squares = [horner[-1]]
    for _ in range(s):
        squares.append(squares[-1] @ squares[-1])
    E = squares[-1]
    out = np.einsum("bij,bj->bi", E, Z0.data)

    def back(g, acc):
        if Z0.requires_grad:
            acc(Z0, np.einsum("bij,bi->bj", E, g))
        if not K.requires_grad:
            return
        G = g[:, :, None] * Z0.data[:, None, :]        # dL/dE
        for X in reversed(squares[:-1]):               # Y = X X
            Xt = np.swapaxes(X, 1, 2)
            G = G @ Xt + Xt @ G
        gS = np.zeros_like(S)
        St = np.swapaxes(S, 1, 2)
        for idx, k in zip(range(m - 1, -1, -1), range(1, m + 1)):
            prev = horner[idx]                          # out = I + S prev / k
            gS += (G @ np.swapaxes(prev, 1, 2)) / k
            G = (St @ G) / k
        acc(K, np.einsum("b,bij->ij", scale, gS))
    return dc.custom_op("expm_action", out, (K, Z0), back)


# ---------------------------------------------------------------------------
# RK4

def _as_interval(x0: Tensor, t0, t1) -> tuple[np.ndarray, np.ndarray]:
    b = x0.shape[0]
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.float64).reshape(-1), (b,)).copy()
    t1 = np.broadcast_to(np.asarray(t1, dtype=np.float64).reshape(-1), (b,)).copy()
    return t0, t1


def integrate_field(field: Field, x0, t0, t1, cfg: IntegrationConfig | None = None) -> Tensor:
    """RK4 with ``ceil(|dt| * steps_per_unit)`` uniform steps per row.

    ``field(x, t)`` maps a batch of row states and a column of times to
    derivatives of the same shape.  Rows needing fewer steps idle (zero step)
    once done; negative intervals step backwards.
    """
    cfg = cfg or IntegrationConfig(method="rk4")
    x = dc.as_tensor(x0)
    t0, t1 = _as_interval(x, t0, t1)
    dt = t1 - t0
    steps = np.ceil(np.abs(dt) * cfg.steps_per_unit).astype(int)
    h_full = np.divide(dt, steps, out=np.zeros_like(dt), where=steps > 0)
    t = t0.copy()
    for k in range(int(steps.max(initial=0))):
        h = np.where(k < steps, h_full, 0.0)
        k1 = field(x, t)
        if k1.shape != x.shape:
            raise ShapeError(f"field returned shape {k1.shape} for state shape {x.shape}")
        k2 = field(dc.add(x, dc.scale_rows(k1, h / 2)), t + h / 2)
        k3 = field(dc.add(x, dc.scale_rows(k2, h / 2)), t + h / 2)
        k4 = field(dc.add(x, dc.scale_rows(k3, h)), t + h)
        incr = dc.add(dc.add(k1, dc.scale(k2, 2.0)), dc.add(dc.scale(k3, 2.0), k4))
        x = dc.add(x, dc.scale_rows(incr, h / 6))
        t = t + h
    return x


def linear_field(K) -> Field:
    """Row-state field z -> z K^T, i.e. dz/dt = K z for column states."""
    Kt = dc.transpose(dc.as_tensor(K))

    def f(z, t=None):
        return dc.matmul(z, Kt)
    return f


def integrate_linear(K, z0, t0, t1, cfg: IntegrationConfig | None = None):
    """State at ``t1`` of dz/dt = K z started from ``z0`` at ``t0``.

    Accepts Tensors (differentiable result) or arrays (array result); ``z0`` may
    be a single state or a batch of rows, and ``t0``/``t1`` scalars or per-row.
    """
    cfg = cfg or IntegrationConfig()
    as_array = not isinstance(K, Tensor) and not isinstance(z0, Tensor)
    K = dc.as_tensor(K)
    _check_square(K.data)
    z = dc.as_tensor(z0)
    if z.shape[1] != K.shape[0]:
        raise ShapeError(f"state width {z.shape[1]} does not match generator {K.shape}")
    t0, t1 = _as_interval(z, t0, t1)
    if cfg.method == "expm":
        out = expm_action(K, z, t1 - t0, cfg.tol)
    else:
        out = integrate_field(linear_field(K), z, t0, t1, cfg)
    if as_array:
        res = np.array(out.data)
        return res[0] if np.ndim(z0) == 1 else res
    return out
