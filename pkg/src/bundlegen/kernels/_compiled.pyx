# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled numeric kernels.

Drop-in replacements for bundlegen.kernels.reference: same signatures, same
results up to floating-point roundoff. The wins over numpy come from fusing
the per-row passes (no temporaries) on the small matrices these loops see.
"""

import numpy as np

from libc.math cimport exp, sqrt

name = "compiled"


def attention_forward(double[:, :, ::1] q, double[:, :, ::1] k,
                      double[:, :, ::1] v, bint causal):
    cdef Py_ssize_t H = q.shape[0], m = q.shape[1], hd = q.shape[2]
    cdef Py_ssize_t n = k.shape[1]
    cdef Py_ssize_t offset = n - m
    out_arr = np.empty((H, m, hd), dtype=np.float64)
    w_arr = np.zeros((H, m, n), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, :, ::1] w = w_arr
    cdef double scale = 1.0 / sqrt(<double> hd)
    cdef Py_ssize_t h, i, j, c, lim
    cdef double s, mx, tot, acc
    for h in range(H):
        for i in range(m):
            lim = n
            if causal:
                lim = i + offset + 1
                if lim > n:
                    lim = n
            mx = -1e308
            for j in range(lim):
                s = 0.0
                for c in range(hd):
                    s += q[h, i, c] * k[h, j, c]
                s *= scale
                w[h, i, j] = s
                if s > mx:
                    mx = s
            tot = 0.0
            for j in range(lim):
                s = exp(w[h, i, j] - mx)
                w[h, i, j] = s
                tot += s
            for j in range(lim):
                w[h, i, j] /= tot
            for c in range(hd):
                acc = 0.0
                for j in range(lim):
                    acc += w[h, i, j] * v[h, j, c]
                out[h, i, c] = acc
    return out_arr, w_arr


def attention_backward(double[:, :, ::1] g_out, double[:, :, ::1] q,
                       double[:, :, ::1] k, double[:, :, ::1] v,
                       double[:, :, ::1] w, bint causal):
    cdef Py_ssize_t H = q.shape[0], m = q.shape[1], hd = q.shape[2]
    cdef Py_ssize_t n = k.shape[1]
    gq_arr = np.zeros((H, m, hd), dtype=np.float64)
    gk_arr = np.zeros((H, n, hd), dtype=np.float64)
    gv_arr = np.zeros((H, n, hd), dtype=np.float64)
    gw_arr = np.empty(n, dtype=np.float64)
    cdef double[:, :, ::1] gq = gq_arr
    cdef double[:, :, ::1] gk = gk_arr
    cdef double[:, :, ::1] gv = gv_arr
    cdef double[::1] gw = gw_arr
    cdef double scale = 1.0 / sqrt(<double> hd)
    cdef Py_ssize_t h, i, j, c
    cdef double s, inner, gs
    for h in range(H):
        for i in range(m):
            inner = 0.0
            for j in range(n):
                if w[h, i, j] == 0.0:
                    gw[j] = 0.0
                    continue
                s = 0.0
                for c in range(hd):
                    s += g_out[h, i, c] * v[h, j, c]
                gw[j] = s
                inner += s * w[h, i, j]
            for j in range(n):
                if w[h, i, j] == 0.0:
                    continue
                gs = w[h, i, j] * (gw[j] - inner) * scale
                for c in range(hd):
                    gq[h, i, c] += gs * k[h, j, c]
                    gk[h, j, c] += gs * q[h, i, c]
                for c in range(hd):
                    gv[h, j, c] += w[h, i, j] * g_out[h, i, c]
    return gq_arr, gk_arr, gv_arr


def layer_norm_forward(double[:, ::1] x, double[::1] gain, double[::1] bias,
                       double eps):
    cdef Py_ssize_t m = x.shape[0], d = x.shape[1]
    y_arr = np.empty((m, d), dtype=np.float64)
    mean_arr = np.empty(m, dtype=np.float64)
    rstd_arr = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    cdef Py_ssize_t i, j
    cdef double mu, var, dx, r
    for i in range(m):
        mu = 0.0
        for j in range(d):
            mu += x[i, j]
        mu /= d
        var = 0.0
        for j in range(d):
            dx = x[i, j] - mu
            var += dx * dx
        var /= d
        r = 1.0 / sqrt(var + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            y[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]
    return y_arr, mean_arr, rstd_arr


def layer_norm_backward(double[:, ::1] g, double[:, ::1] x, double[::1] gain,
                        double[::1] mean, double[::1] rstd):
    cdef Py_ssize_t m = x.shape[0], d = x.shape[1]
    gx_arr = np.empty((m, d), dtype=np.float64)
    ggain_arr = np.zeros(d, dtype=np.float64)
    gbias_arr = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] ggain = ggain_arr
    cdef double[::1] gbias = gbias_arr
    cdef Py_ssize_t i, j
    cdef double m1, m2, xhat, gxh, r, mu
    for i in range(m):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xhat = (x[i, j] - mu) * r
            gxh = g[i, j] * gain[j]
            m1 += gxh
            m2 += gxh * xhat
            ggain[j] += g[i, j] * xhat
            gbias[j] += g[i, j]
        m1 /= d
        m2 /= d
        for j in range(d):
            xhat = (x[i, j] - mu) * r
            gx[i, j] = r * (g[i, j] * gain[j] - m1 - xhat * m2)
    return gx_arr, ggain_arr, gbias_arr


def csr_matmul(indptr, indices, data, Py_ssize_t n_cols, dense):
    cdef long long[::1] ip = np.ascontiguousarray(indptr, dtype=np.int64)
    cdef long long[::1] ix = np.ascontiguousarray(indices, dtype=np.int64)
    cdef double[::1] dv = np.ascontiguousarray(data, dtype=np.float64)
    cdef double[:, ::1] X = np.ascontiguousarray(dense, dtype=np.float64)
    cdef Py_ssize_t n_rows = ip.shape[0] - 1
    cdef Py_ssize_t d = X.shape[1]
    out_arr = np.zeros((n_rows, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, p, c
    cdef Py_ssize_t col
    cdef double val
    for i in range(n_rows):
        for p in range(ip[i], ip[i + 1]):
            col = <Py_ssize_t> ix[p]
            val = dv[p]
            for c in range(d):
                out[i, c] += val * X[col, c]
    return out_arr


def adam_step(double[::1] param, double[::1] grad, double[::1] m,
              double[::1] v, long long t, double lr, double beta1,
              double beta2, double eps):
    cdef Py_ssize_t n = param.shape[0]
    cdef double c1 = 1.0 - beta1 ** t
    cdef double c2 = 1.0 - beta2 ** t
    cdef Py_ssize_t i
    cdef double g, mi, vi
    for i in range(n):
        g = grad[i]
        mi = beta1 * m[i] + (1.0 - beta1) * g
        vi = beta2 * v[i] + (1.0 - beta2) * g * g
        m[i] = mi
        v[i] = vi
        param[i] -= lr * (mi / c1) / (sqrt(vi / c2) + eps)
