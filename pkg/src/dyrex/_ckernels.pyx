# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled kernel backend.

Same call surface as ``_pykernels``. Inner loops run without the GIL so
coarse-grained thread pools (DYREX_THREADS) can overlap compute.

Accumulations run over the inner index in ascending order; together with
-ffp-contract=off this makes ``matmul`` bit-identical to a plain Python
triple loop.
"""

import numpy as np

from libc.math cimport erf, exp, sqrt


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double aik
    out = np.zeros((m, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    o[i, j] += aik * b[k, j]
    return out


def matmul_tn(double[:, ::1] a, double[:, ::1] b):
    """a.T @ b; contraction index runs over rows of a and b."""
    cdef Py_ssize_t kk = a.shape[0], m = a.shape[1], n = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef double aki
    out = np.zeros((m, n))
    cdef double[:, ::1] o = out
    with nogil:
        for k in range(kk):
            for i in range(m):
                aki = a[k, i]
                for j in range(n):
                    o[i, j] += aki * b[k, j]
    return out


def matmul_nt(double[:, ::1] a, double[:, ::1] b):
    """a @ b.T; contraction index runs over columns of a and b."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[0]
    cdef Py_ssize_t i, k, j
    cdef double acc
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                acc = 0.0
                for k in range(kk):
                    acc += a[i, k] * b[j, k]
                o[i, j] = acc
    return out


def add_row_bias(double[:, ::1] x, double[::1] bias):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                o[i, j] = x[i, j] + bias[j]
    return out


def col_sums(double[:, ::1] x):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    out = np.zeros(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                o[j] += x[i, j]
    return out


def softmax_rows(double[:, ::1] x, mask):
    """Row-wise exp-normalize; masked entries get exactly 0 probability.

    Caller guarantees every row has at least one allowed entry.
    """
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double hi, z
    cdef bint first
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef double[:, ::1] mk
    if mask is None:
        with nogil:
            for i in range(m):
                hi = x[i, 0]
                for j in range(1, n):
                    if x[i, j] > hi:
                        hi = x[i, j]
                z = 0.0
                for j in range(n):
                    o[i, j] = exp(x[i, j] - hi)
                    z += o[i, j]
                for j in range(n):
                    o[i, j] /= z
        return out
    mk = mask
    with nogil:
        for i in range(m):
            hi = 0.0
            first = True
            for j in range(n):
                if mk[i, j] > 0.0 and (first or x[i, j] > hi):
                    hi = x[i, j]
                    first = False
            z = 0.0
            for j in range(n):
                if mk[i, j] > 0.0:
                    o[i, j] = exp(x[i, j] - hi)
                    z += o[i, j]
                else:
                    o[i, j] = 0.0
            for j in range(n):
                o[i, j] /= z
    return out


def softmax_rows_grad(double[:, ::1] p, double[:, ::1] grad_out, mask):
    cdef Py_ssize_t m = p.shape[0], n = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double dot
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    cdef double[:, ::1] mk
    if mask is None:
        with nogil:
            for i in range(m):
                dot = 0.0
                for j in range(n):
                    dot += p[i, j] * grad_out[i, j]
                for j in range(n):
                    o[i, j] = p[i, j] * (grad_out[i, j] - dot)
        return out
    mk = mask
    with nogil:
        for i in range(m):
            dot = 0.0
            for j in range(n):
                dot += p[i, j] * grad_out[i, j]
            for j in range(n):
                if mk[i, j] > 0.0:
                    o[i, j] = p[i, j] * (grad_out[i, j] - dot)
                else:
                    o[i, j] = 0.0
    return out


def layer_norm_rows(double[:, ::1] x, double[::1] gamma, double[::1] beta,
                    double eps):
    """Returns (y, xhat, inv_std); xhat and inv_std are the backward cache."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mean, var, dev, istd
    y = np.empty((m, n))
    xhat = np.empty((m, n))
    inv_std = np.empty(m)
    cdef double[:, ::1] yv = y
    cdef double[:, ::1] xh = xhat
    cdef double[::1] isv = inv_std
    with nogil:
        for i in range(m):
            mean = 0.0
            for j in range(n):
                mean += x[i, j]
            mean /= n
            var = 0.0
            for j in range(n):
                dev = x[i, j] - mean
                var += dev * dev
            var /= n
            istd = 1.0 / sqrt(var + eps)
            isv[i] = istd
            for j in range(n):
                xh[i, j] = (x[i, j] - mean) * istd
                yv[i, j] = xh[i, j] * gamma[j] + beta[j]
    return y, xhat, inv_std


def layer_norm_rows_grad(double[:, ::1] grad_out, double[:, ::1] xhat,
                         double[::1] inv_std, double[::1] gamma):
    cdef Py_ssize_t m = xhat.shape[0], n = xhat.shape[1]
    cdef Py_ssize_t i, j
    cdef double s1, s2, dxh
    grad_x = np.empty((m, n))
    grad_gamma = np.zeros(n)
    grad_beta = np.zeros(n)
    cdef double[:, ::1] gx = grad_x
    cdef double[::1] gg = grad_gamma
    cdef double[::1] gb = grad_beta
    with nogil:
        for i in range(m):
            s1 = 0.0
            s2 = 0.0
            for j in range(n):
                dxh = grad_out[i, j] * gamma[j]
                s1 += dxh
                s2 += dxh * xhat[i, j]
            s1 /= n
            s2 /= n
            for j in range(n):
                dxh = grad_out[i, j] * gamma[j]
                gx[i, j] = inv_std[i] * (dxh - s1 - xhat[i, j] * s2)
                gg[j] += grad_out[i, j] * xhat[i, j]
                gb[j] += grad_out[i, j]
    return grad_x, grad_gamma, grad_beta


def gelu(double[:, ::1] x):
    """Exact (erf-based) x * Phi(x)."""
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double inv_sqrt2 = _INV_SQRT2
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                o[i, j] = x[i, j] * 0.5 * (1.0 + erf(x[i, j] * inv_sqrt2))
    return out


def gelu_grad(double[:, ::1] x, double[:, ::1] grad_out):
    cdef Py_ssize_t m = x.shape[0], n = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double inv_sqrt2 = _INV_SQRT2
    cdef double inv_sqrt_2pi = _INV_SQRT_2PI
    cdef double cdf, pdf
    out = np.empty((m, n))
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(m):
            for j in range(n):
                cdf = 0.5 * (1.0 + erf(x[i, j] * inv_sqrt2))
                pdf = inv_sqrt_2pi * exp(-0.5 * x[i, j] * x[i, j])
                o[i, j] = grad_out[i, j] * (cdf + x[i, j] * pdf)
    return out
