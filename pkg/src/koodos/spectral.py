"""Eigenvalues of the latent generator, stability verdicts, and PCA of
parameter trajectories.

Eigenvalues come from a Householder reduction to Hessenberg form followed by
Francis double-shift QR iterations (real arithmetic; complex eigenvalues come
out as exact conjugate pairs).  PCA uses cyclic Jacobi rotations on the
covariance matrix, or on the Gram matrix when points outnumber dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

STABILITY_TOL = 1e-8


class ConvergenceError(RuntimeError):
    pass


def hessenberg(M: np.ndarray) -> np.ndarray:
    """Upper Hessenberg matrix orthogonally similar to ``M``."""
    H = np.array(M, dtype=np.float64)
    n = H.shape[0]
    for k in range(n - 2):
        x = H[k + 1:, k]
        alpha = np.linalg.norm(x)
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0])
        v /= np.linalg.norm(v)
        H[k + 1:, k:] -= 2.0 * np.outer(v, v @ H[k + 1:, k:])
        H[:, k + 1:] -= 2.0 * np.outer(H[:, k + 1:] @ v, v)
        H[k + 2:, k] = 0.0
    return H


def _francis(a: list[list[float]], max_iter: int, norm_label: float) -> list[complex]:
    n = len(a)
    wr = [0.0] * n
    wi = [0.0] * n
    anorm = sum(abs(a[i][j]) for i in range(n) for j in range(max(i - 1, 0), n))
    nn = n - 1
    t = 0.0
    total = 0
    x = y = w = p = q = r = z = 0.0
    while nn >= 0:
        its = 0
        while True:
            l = nn
            while l >= 1:
                s = abs(a[l - 1][l - 1]) + abs(a[l][l])
                if s == 0.0:
                    s = anorm
                if abs(a[l][l - 1]) + s == s:
                    a[l][l - 1] = 0.0
                    break
                l -= 1
            x = a[nn][nn]
            if l == nn:
                wr[nn], wi[nn] = x + t, 0.0
                nn -= 1
                break
            y = a[nn - 1][nn - 1]
            w = a[nn][nn - 1] * a[nn - 1][nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z:
                        wr[nn] = x - w / z
                    wi[nn - 1] = wi[nn] = 0.0
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1], wi[nn] = -z, z
                nn -= 2
                break
            if total >= max_iter:
                raise ConvergenceError(
                    f"QR iteration did not converge in {max_iter} sweeps (matrix 1-norm {norm_label:.6g})")
            if its in (10, 20):  # exceptional shift
                t += x
                for i in range(nn + 1):
                    a[i][i] -= x
                s = abs(a[nn][nn - 1]) + abs(a[nn - 1][nn - 2])
                y = x = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            total += 1
            m = nn - 2
            while m >= l:
                z = a[m][m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1][m] + a[m][m + 1]
                q = a[m + 1][m + 1] - z - r - s
                r = a[m + 2][m + 1]
                s = abs(p) + abs(q) + abs(r)
                p /= s
                q /= s
                r /= s
                if m == l:
                    break
                u = abs(a[m][m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1][m - 1]) + abs(z) + abs(a[m + 1][m + 1]))
                if u + v == v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                a[i][i - 2] = 0.0
                if i != m + 2:
                    a[i][i - 3] = 0.0
            for k in range(m, nn):
                if k != m:
                    p = a[k][k - 1]
                    q = a[k + 1][k - 1]
                    r = a[k + 2][k - 1] if k != nn - 1 else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p /= x
                        q /= x
                        r /= x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s == 0.0:
                    continue
                if k == m:
                    if l != m:
                        a[k][k - 1] = -a[k][k - 1]
                else:
                    a[k][k - 1] = -s * x
                p += s
                x = p / s
                y = q / s
                z = r / s
                q /= p
                r /= p
                rk, rk1 = a[k], a[k + 1]
                rk2 = a[k + 2] if k != nn - 1 else None
                for j in range(k, nn + 1):
                    p = rk[j] + q * rk1[j]
                    if rk2 is not None:
                        p += r * rk2[j]
                        rk2[j] -= p * z
                    rk1[j] -= p * y
                    rk[j] -= p * x
                for i in range(l, min(nn, k + 3) + 1):
                    ai = a[i]
                    p = x * ai[k] + y * ai[k + 1]
                    if rk2 is not None:
                        p += z * ai[k + 2]
                        ai[k + 2] -= p * r
                    ai[k + 1] -= p * q
                    ai[k] -= p
    return [complex(re, im) for re, im in zip(wr, wi)]


def eigenvalues(M, max_sweeps: int | None = None) -> list[complex]:
    """All eigenvalues of a real square matrix (unordered, conjugate-paired)."""
    M = np.asarray(getattr(M, "data", M), dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"eigenvalues need a square matrix, got shape {M.shape}")
    if not np.isfinite(M).all():
        raise ValueError("eigenvalues: matrix has non-finite entries")
    n = M.shape[0]
    if n == 0:
        return []
    max_sweeps = 100 * n if max_sweeps is None else max_sweeps
    H = hessenberg(M)
    return _francis(H.tolist(), max_sweeps, float(np.abs(M).sum(axis=0).max()))


@dataclass
class SpectralReport:
    eigenvalues: list[complex]
    classification: str
    max_real: float

    def rows(self) -> list[tuple[float, float]]:
        return [(z.real, z.imag) for z in self.eigenvalues]


def classify(eigs: Sequence[complex], tol: float = STABILITY_TOL) -> str:
    re = [z.real for z in eigs]
    if any(x > tol for x in re):
        return "unstable"
    if all(x < -tol for x in re):
        return "stable"
    return "marginal"


def assess_stability(M, tol: float = STABILITY_TOL) -> SpectralReport:
    eigs = eigenvalues(M)
    return SpectralReport(eigs, classify(eigs, tol), max(z.real for z in eigs))


def write_spectrum_csv(report: SpectralReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("re,im\n")
        for re, im in report.rows():
            fh.write(f"{re!r},{im!r}\n")


# ---------------------------------------------------------------------------
# PCA

def jacobi_eigh(S: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenpairs of a symmetric matrix by cyclic Jacobi rotations, sorted by
    decreasing eigenvalue.  Returns (values, vectors as columns)."""
    A = np.array(S, dtype=np.float64)
    n = A.shape[0]
    V = np.eye(n)
    scale = np.linalg.norm(A)
    if scale == 0.0 or n == 1:
        return np.diag(A).copy(), V
    for _ in range(max_sweeps):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                cp, cq = A[:, p].copy(), A[:, q].copy()
                A[:, p], A[:, q] = c * cp - s * cq, s * cp + c * cq
                rp, rq = A[p, :].copy(), A[q, :].copy()
                A[p, :], A[q, :] = c * rp - s * rq, s * rp + c * rq
                A[p, q] = A[q, p] = 0.0
                vp, vq = V[:, p].copy(), V[:, q].copy()
                V[:, p], V[:, q] = c * vp - s * vq, s * vp + c * vq
    else:
        raise ConvergenceError("Jacobi eigensolver did not converge")
    vals = np.diag(A).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], V[:, order]


@dataclass
class PcaResult:
    points: np.ndarray          # N x dims
    variances: np.ndarray       # variance along each kept component
    explained_ratio: np.ndarray
    components: np.ndarray      # dims x D
    mean: np.ndarray


def _as_matrix(trajectory) -> np.ndarray:
    rows = []
    for item in trajectory:
        item = getattr(item, "theta", item)
        rows.append(np.asarray(getattr(item, "data", item), dtype=np.float64).reshape(-1))
    return np.vstack(rows)


def pca_project(trajectory, dims: int = 2) -> PcaResult:
    """Mean-centred PCA projection of a sequence of vectors onto ``dims`` axes."""
    X = _as_matrix(trajectory)
    N, D = X.shape
    if dims < 1:
        raise ValueError("dims must be >= 1")
    mu = X.mean(axis=0)
    Xc = X - mu
    denom = max(N - 1, 1)
    if D <= N:
        vals, vecs = jacobi_eigh(Xc.T @ Xc / denom)
        comps = vecs.T
    else:
        vals, U = jacobi_eigh(Xc @ Xc.T / denom)
        comps = U.T @ Xc
        norms = np.linalg.norm(comps, axis=1, keepdims=True)
        comps = np.divide(comps, norms, out=np.zeros_like(comps), where=norms > 0)
    vals = np.clip(vals, 0.0, None)
    k = min(dims, comps.shape[0])
    comps = comps[:k]
    vals = vals[:k] if vals.size >= k else np.pad(vals, (0, k - vals.size))
    for c in comps:  # sign convention: largest-magnitude loading positive
        j = int(np.argmax(np.abs(c)))
        if c[j] < 0:
            c *= -1.0
    pts = Xc @ comps.T
    if k < dims:
        pts = np.hstack([pts, np.zeros((N, dims - k))])
        comps = np.vstack([comps, np.zeros((dims - k, D))])
        vals = np.pad(vals, (0, dims - k))
    total = np.trace(Xc.T @ Xc) / denom if D <= N else np.trace(Xc @ Xc.T) / denom
    ratio = vals / total if total > 0 else np.zeros_like(vals)
    return PcaResult(pts, vals, ratio, comps, mu)


def write_trajectory_csv(times: Sequence[float], points: np.ndarray, path) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(["t"] + [f"c{j + 1}" for j in range(points.shape[1])]) + "\n")
        for t, row in zip(times, points):
            fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in row]) + "\n")
