# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops.  Must stay numerically identical to _kernels_py."""
from libc.math cimport sqrt


def adam_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                double lr, double beta1, double beta2, double eps, long step):
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double step_size = lr / (1.0 - beta1 ** step)
    cdef double root_c2 = sqrt(1.0 - beta2 ** step)
    cdef double a1 = 1.0 - beta1, a2 = 1.0 - beta2
    cdef double gi, mi, vi
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adam_update: buffer lengths differ")
    with nogil:
        for i in range(n):
            gi = g[i]
            mi = beta1 * m[i] + a1 * gi
            vi = beta2 * v[i] + a2 * (gi * gi)
            m[i] = mi
            v[i] = vi
            p[i] = p[i] - step_size * mi / (sqrt(vi) / root_c2 + eps)
