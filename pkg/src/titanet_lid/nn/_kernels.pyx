# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: depthwise conv, masked batch norm (+ReLU) and stats pooling.

Arrays are float64, C-contiguous, laid out as (batch, channels, time).
``lengths`` holds each item's valid frame count.
"""
from libc.math cimport sqrt

import numpy as np


cdef inline double _relu(double v) noexcept nogil:
    return v if v > 0.0 else 0.0


def dwconv_forward(const double[:, :, ::1] x, const double[:, ::1] w):
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], n_t = x.shape[2]
    cdef Py_ssize_t K = w.shape[1], pad = (w.shape[1] - 1) // 2
    cdef Py_ssize_t n, c, t, k, lo, hi
    cdef double wk
    out_arr = np.zeros((n_batch, n_ch, n_t), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for n in range(n_batch):
        for c in range(n_ch):
            for k in range(K):
                wk = w[c, k]
                # out[t] += x[t + k - pad] * w[k] for in-range reads
                lo = pad - k if pad > k else 0
                hi = n_t + pad - k if n_t + pad - k < n_t else n_t
                for t in range(lo, hi):
                    out[n, c, t] += x[n, c, t + k - pad] * wk
    return out_arr


def dwconv_backward(const double[:, :, ::1] g, const double[:, :, ::1] x,
                    const double[:, ::1] w):
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], n_t = x.shape[2]
    cdef Py_ssize_t K = w.shape[1], pad = (w.shape[1] - 1) // 2
    cdef Py_ssize_t n, c, t, k, lo, hi, s
    cdef double wk, acc
    gx_arr = np.zeros((n_batch, n_ch, n_t), dtype=np.float64)
    gw_arr = np.zeros((n_ch, K), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, ::1] gw = gw_arr
    for n in range(n_batch):
        for c in range(n_ch):
            for k in range(K):
                wk = w[c, k]
                s = k - pad
                lo = -s if s < 0 else 0
                hi = n_t - s if s > 0 else n_t
                acc = 0.0
                for t in range(lo, hi):
                    acc = acc + g[n, c, t] * x[n, c, t + s]
                    gx[n, c, t + s] += g[n, c, t] * wk
                gw[c, k] += acc
    return gx_arr, gw_arr


def bn_stats(const double[:, :, ::1] x, const long long[::1] lengths):
    """Per-channel mean and population variance over valid frames, plus the valid count."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t n, c, t, L
    cdef double s, d, count = 0.0
    for n in range(n_batch):
        count += lengths[n]
    mean_arr = np.zeros(n_ch, dtype=np.float64)
    var_arr = np.zeros(n_ch, dtype=np.float64)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    if count == 0:
        return mean_arr, var_arr, 0.0
    for c in range(n_ch):
        s = 0.0
        for n in range(n_batch):
            L = lengths[n]
            for t in range(L):
                s += x[n, c, t]
        mean[c] = s / count
        s = 0.0
        for n in range(n_batch):
            L = lengths[n]
            for t in range(L):
                d = x[n, c, t] - mean[c]
                s += d * d
        var[c] = s / count
    return mean_arr, var_arr, count


def affine_act_forward(const double[:, :, ::1] x, const double[::1] scale,
                       const double[::1] shift, bint relu):
    """``y = x * scale[c] + shift[c]``, optionally followed by ReLU."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], n_t = x.shape[2]
    cdef Py_ssize_t n, c, t
    cdef double a, b, v
    out_arr = np.empty((n_batch, n_ch, n_t), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    for n in range(n_batch):
        for c in range(n_ch):
            a = scale[c]
            b = shift[c]
            if relu:
                for t in range(n_t):
                    out[n, c, t] = _relu(x[n, c, t] * a + b)
            else:
                for t in range(n_t):
                    out[n, c, t] = x[n, c, t] * a + b
    return out_arr


def bn_backward(const double[:, :, ::1] g, const double[:, :, ::1] x,
                const double[::1] scale, const double[::1] shift,
                const double[::1] mean, const double[::1] inv_std,
                const long long[::1] lengths, bint relu, bint training):
    """Gradients of (optionally ReLU-gated) batch norm w.r.t. input, gamma and beta."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], n_t = x.shape[2]
    cdef Py_ssize_t n, c, t, L
    cdef double gp, xh, sg, sgx, count = 0.0, a, b, mu, istd, k
    for n in range(n_batch):
        count += lengths[n]
    gx_arr = np.empty((n_batch, n_ch, n_t), dtype=np.float64)
    gg_arr = np.zeros(n_ch, dtype=np.float64)
    gb_arr = np.zeros(n_ch, dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[::1] ggamma = gg_arr
    cdef double[::1] gbeta = gb_arr
    for c in range(n_ch):
        a = scale[c]
        b = shift[c]
        mu = mean[c]
        istd = inv_std[c]
        sg = 0.0
        sgx = 0.0
        for n in range(n_batch):
            for t in range(n_t):
                gp = g[n, c, t]
                if relu:
                    gp = gp * (x[n, c, t] * a + b > 0.0)
                xh = (x[n, c, t] - mu) * istd
                sg += gp
                sgx += gp * xh
        ggamma[c] = sgx
        gbeta[c] = sg
        for n in range(n_batch):
            L = lengths[n] if training else 0
            for t in range(n_t):
                gp = g[n, c, t]
                if relu:
                    gp = gp * (x[n, c, t] * a + b > 0.0)
                if t < L:
                    xh = (x[n, c, t] - mu) * istd
                    gx[n, c, t] = a * (gp - (sg + xh * sgx) / count)
                else:
                    gx[n, c, t] = a * gp
    return gx_arr, gg_arr, gb_arr


def stats_pool_forward(const double[:, :, ::1] x, const long long[::1] lengths, double floor):
    """Masked per-channel mean and floored population std; returns (out[N, 2C], mean, std, floored)."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t n, c, t, L
    cdef double s, d, mu, var
    out_arr = np.empty((n_batch, 2 * n_ch), dtype=np.float64)
    fl_arr = np.zeros((n_batch, n_ch), dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[:, ::1] floored = fl_arr
    for n in range(n_batch):
        L = lengths[n]
        for c in range(n_ch):
            s = 0.0
            for t in range(L):
                s += x[n, c, t]
            mu = s / L
            s = 0.0
            for t in range(L):
                d = x[n, c, t] - mu
                s += d * d
            var = s / L
            if var <= floor:
                var = floor
                floored[n, c] = 1
            out[n, c] = mu
            out[n, n_ch + c] = sqrt(var)
    return out_arr, fl_arr


def stats_pool_backward(const double[:, ::1] g, const double[:, :, ::1] x,
                        const double[:, ::1] pooled, const unsigned char[:, ::1] floored,
                        const long long[::1] lengths):
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], n_t = x.shape[2]
    cdef Py_ssize_t n, c, t, L
    cdef double gm, coef, mu
    gx_arr = np.zeros((n_batch, n_ch, n_t), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    for n in range(n_batch):
        L = lengths[n]
        for c in range(n_ch):
            mu = pooled[n, c]
            gm = g[n, c] / L
            coef = 0.0 if floored[n, c] else g[n, n_ch + c] / (L * pooled[n, n_ch + c])
            for t in range(L):
                gx[n, c, t] = gm + coef * (x[n, c, t] - mu)
    return gx_arr


def bn_relu_pool_forward(const double[:, :, ::1] x, const double[::1] scale,
                         const double[::1] shift, const long long[::1] lengths, double floor):
    """stats_pool(relu(x * scale + shift)) without materializing the activation."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1]
    cdef Py_ssize_t n, c, t, L
    cdef double s, d, h, mu, var, a, b
    out_arr = np.empty((n_batch, 2 * n_ch), dtype=np.float64)
    fl_arr = np.zeros((n_batch, n_ch), dtype=np.uint8)
    cdef double[:, ::1] out = out_arr
    cdef unsigned char[:, ::1] floored = fl_arr
    for n in range(n_batch):
        L = lengths[n]
        for c in range(n_ch):
            a = scale[c]
            b = shift[c]
            s = 0.0
            for t in range(L):
                s += _relu(x[n, c, t] * a + b)
            mu = s / L
            s = 0.0
            for t in range(L):
                d = _relu(x[n, c, t] * a + b) - mu
                s += d * d
            var = s / L
            if var <= floor:
                var = floor
                floored[n, c] = 1
            out[n, c] = mu
            out[n, n_ch + c] = sqrt(var)
    return out_arr, fl_arr


def bn_relu_pool_backward(const double[:, ::1] g, const double[:, :, ::1] x,
                          const double[::1] scale, const double[::1] shift,
                          const double[::1] mean, const double[::1] inv_std,
                          const double[:, ::1] pooled, const unsigned char[:, ::1] floored,
                          const long long[::1] lengths, bint training):
    """Gradients of the fused op w.r.t. x, gamma and beta."""
    cdef Py_ssize_t n_batch = x.shape[0], n_ch = x.shape[1], n_t = x.shape[2]
    cdef Py_ssize_t n, c, t, L
    cdef double gp, h, xh, sg, sgx, count = 0.0, a, b, mu, istd
    for n in range(n_batch):
        count += lengths[n]
    gx_arr = np.empty((n_batch, n_ch, n_t), dtype=np.float64)
    gg_arr = np.zeros(n_ch, dtype=np.float64)
    gb_arr = np.zeros(n_ch, dtype=np.float64)
    gm_arr = np.empty((n_batch, n_ch), dtype=np.float64)
    cf_arr = np.empty((n_batch, n_ch), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[::1] ggamma = gg_arr
    cdef double[::1] gbeta = gb_arr
    cdef double[:, ::1] gm = gm_arr
    cdef double[:, ::1] coef = cf_arr
    for n in range(n_batch):
        L = lengths[n]
        for c in range(n_ch):
            gm[n, c] = g[n, c] / L
            coef[n, c] = 0.0 if floored[n, c] else g[n, n_ch + c] / (L * pooled[n, n_ch + c])
    for c in range(n_ch):
        a = scale[c]
        b = shift[c]
        mu = mean[c]
        istd = inv_std[c]
        sg = 0.0
        sgx = 0.0
        for n in range(n_batch):
            L = lengths[n]
            for t in range(L):
                h = x[n, c, t] * a + b
                gp = (h > 0.0) * (gm[n, c] + coef[n, c] * (h - pooled[n, c]))
                sg += gp
                sgx += gp * (x[n, c, t] - mu) * istd
        ggamma[c] = sgx
        gbeta[c] = sg
        for n in range(n_batch):
            L = lengths[n]
            for t in range(L):
                h = x[n, c, t] * a + b
                gp = (h > 0.0) * (gm[n, c] + coef[n, c] * (h - pooled[n, c]))
                if training:
                    gp = gp - (sg + (x[n, c, t] - mu) * istd * sgx) / count
                gx[n, c, t] = a * gp
            for t in range(L, n_t):
                gx[n, c, t] = 0.0
    return gx_arr, gg_arr, gb_arr
